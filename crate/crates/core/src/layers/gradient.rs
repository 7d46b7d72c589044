//! Data-consistency step `z = x - alpha * grad D(x)` with
//! `D(x) = 1/2 sum_i c_i ||A_i x - y_i||^2`.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::fixed_point::{check_contraction, fixed_point_solve, FixedPointConfig};
use crate::numerics::{power_iteration, LinearOperator, Tensor};

use super::{LayerVjp, OpMeter};

/// Power-iteration budget and seed for invertibility certificates.
pub const CERTIFICATE_ITERS: usize = 300;
pub const CERTIFICATE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub struct FidelityTerm {
    pub weight: f64,
    pub operator: LinearOperator,
}

/// The measurement operators and weights of a fidelity term, shared between
/// all gradient layers of a network. Measurements live on the layer.
#[derive(Debug)]
pub struct ForwardModel {
    terms: Vec<FidelityTerm>,
    in_shape: Vec<usize>,
    sigma: OnceLock<f64>,
}

impl Clone for ForwardModel {
    fn clone(&self) -> Self {
        Self {
            terms: self.terms.clone(),
            in_shape: self.in_shape.clone(),
            sigma: self.sigma.clone(),
        }
    }
}

impl ForwardModel {
    pub fn new(terms: Vec<FidelityTerm>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::InvalidArgument("fidelity needs at least one term".into()));
        };
        let in_shape = first.operator.in_shape().to_vec();
        for t in &terms {
            if t.operator.in_shape() != in_shape.as_slice() {
                return Err(Error::shape("fidelity operator input", &in_shape, t.operator.in_shape()));
            }
            if !t.weight.is_finite() {
                return Err(Error::InvalidArgument("non-finite fidelity weight".into()));
            }
        }
        Ok(Self {
            terms,
            in_shape,
            sigma: OnceLock::new(),
        })
    }

    pub fn single(operator: LinearOperator) -> Self {
        Self::new(vec![FidelityTerm {
            weight: 1.0,
            operator,
        }])
        .expect("one term")
    }

    pub fn terms(&self) -> &[FidelityTerm] {
        &self.terms
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    /// `sum_i c_i A_i^H A_i x`.
    pub fn normal(&self, x: &Tensor) -> Tensor {
        self.weighted_normal(x, |c| c)
    }

    fn weighted_normal(&self, x: &Tensor, weight: impl Fn(f64) -> f64) -> Tensor {
        let mut acc = Tensor::zeros(&self.in_shape);
        for t in &self.terms {
            let n = t.operator.adjoint_unchecked(&t.operator.forward_unchecked(x));
            acc.axpy(weight(t.weight), &n);
        }
        acc
    }

    /// Bound on the spectral norm of `sum_i c_i A_i^H A_i`, cached.
    ///
    /// Uses `|c_i|`, which is exact for nonnegative weights and an upper bound otherwise.
    pub fn sigma_max(&self) -> f64 {
        *self.sigma.get_or_init(|| {
            power_iteration(&self.in_shape, CERTIFICATE_ITERS, CERTIFICATE_SEED, |v| {
                self.weighted_normal(v, f64::abs)
            })
            .map(|e| e.value)
            .unwrap_or(f64::INFINITY)
        })
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.terms.len() {
            return Err(Error::InvalidArgument("fidelity weight count mismatch".into()));
        }
        let terms = self
            .terms
            .iter()
            .zip(weights)
            .map(|(t, &w)| FidelityTerm {
                weight: w,
                operator: t.operator.clone(),
            })
            .collect();
        Self::new(terms)
    }

    /// Replaces the design coefficients of term `term`.
    pub fn with_design(&self, term: usize, coefficients: &[f64]) -> Result<Self> {
        let mut terms = self.terms.clone();
        let t = terms
            .get_mut(term)
            .ok_or_else(|| Error::InvalidArgument(format!("no fidelity term {term}")))?;
        t.operator = t.operator.with_design_coefficients(coefficients)?;
        Self::new(terms)
    }

    pub(crate) fn design_counts(&self) -> Vec<usize> {
        self.terms
            .iter()
            .map(|t| t.operator.design_view().map_or(0, |d| d.coefficients.len()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradientLayer {
    step: f64,
    model: Arc<ForwardModel>,
    measurements: Arc<Vec<Tensor>>,
}

impl GradientLayer {
    pub fn new(step: f64, model: Arc<ForwardModel>, measurements: Arc<Vec<Tensor>>) -> Result<Self> {
        if !step.is_finite() {
            return Err(Error::InvalidArgument(format!("gradient step must be finite, got {step}")));
        }
        if measurements.len() != model.terms.len() {
            return Err(Error::InvalidArgument(format!(
                "{} measurements for {} fidelity terms",
                measurements.len(),
                model.terms.len()
            )));
        }
        for (t, y) in model.terms.iter().zip(measurements.iter()) {
            y.expect_shape(t.operator.out_shape(), "measurement")?;
        }
        Ok(Self {
            step,
            model,
            measurements,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn model(&self) -> &Arc<ForwardModel> {
        &self.model
    }

    pub fn measurements(&self) -> &Arc<Vec<Tensor>> {
        &self.measurements
    }

    pub fn shape(&self) -> &[usize] {
        self.model.in_shape()
    }

    /// Lipschitz constant of `alpha * grad D`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.step.abs() * self.model.sigma_max()
    }

    /// `sum_i c_i A_i^H (A_i x - y_i)`.
    pub fn fidelity_gradient(&self, x: &Tensor) -> Tensor {
        let mut acc = Tensor::zeros(self.shape());
        for (t, y) in self.model.terms.iter().zip(self.measurements.iter()) {
            let r = &t.operator.forward_unchecked(x) - y;
            acc.axpy(t.weight, &t.operator.adjoint_unchecked(&r));
        }
        acc
    }

    pub(crate) fn forward(&self, x: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        x.expect_shape(self.shape(), "gradient layer input")?;
        meter.operator_applications += 1;
        let mut z = x.clone();
        z.axpy(-self.step, &self.fidelity_gradient(x));
        Ok(z)
    }

    /// Backward-Euler inverse: iterate `x <- z + alpha * grad D(x)` from `x = z`.
    pub(crate) fn inverse(&self, z: &Tensor, cfg: &FixedPointConfig, meter: &mut OpMeter) -> Result<Tensor> {
        z.expect_shape(self.shape(), "gradient layer output")?;
        let verdict = check_contraction(self.lipschitz_bound());
        if !verdict.accepted {
            return Err(Error::NotContractive { bound: verdict.bound });
        }
        let result = fixed_point_solve(
            |x| {
                let mut next = z.clone();
                next.axpy(self.step, &self.fidelity_gradient(x));
                Ok(next)
            },
            z,
            cfg,
        )?;
        meter.operator_applications += result.iterations_used as u64;
        meter.fixed_point_inner_iterations += result.iterations_used as u64;
        Ok(result.solution)
    }

    pub(crate) fn vjp(&self, x: &Tensor, q: &Tensor, meter: &mut OpMeter) -> Result<LayerVjp> {
        x.expect_shape(self.shape(), "gradient layer input")?;
        q.expect_shape(self.shape(), "gradient layer cotangent")?;
        meter.operator_applications += 1;
        let alpha = self.step;
        let terms = &self.model.terms;

        let mut input_grad = q.clone();
        let mut fidelity_grad = Tensor::zeros(self.shape());
        let mut weight_grads = Vec::with_capacity(terms.len());
        let mut design_grads = Vec::new();
        let mut measurement_grads = Vec::with_capacity(terms.len());

        for (t, y) in terms.iter().zip(self.measurements.iter()) {
            let c = t.weight;
            let residual = &t.operator.forward_unchecked(x) - y;
            let back = t.operator.adjoint_unchecked(&residual);
            let aq = t.operator.forward_unchecked(q);
            input_grad.axpy(-alpha * c, &t.operator.adjoint_unchecked(&aq));
            fidelity_grad.axpy(c, &back);
            weight_grads.push(-alpha * back.real_dot(q));
            if let Some(design) = t.operator.design_view() {
                // d/dw_s [A^H (A x - y)] = B_s^H r + A^H B_s x with B_s -> B_s R
                let bx = design.partials(x);
                let bq = design.partials(q);
                for (bxs, bqs) in bx.iter().zip(&bq) {
                    let g = residual.real_dot(bqs) + bxs.real_dot(&aq);
                    design_grads.push(-alpha * c * g);
                }
            }
            measurement_grads.push(aq.scale(alpha * c));
        }

        let mut param_grads = Vec::with_capacity(1 + weight_grads.len() + design_grads.len());
        param_grads.push(-fidelity_grad.real_dot(q));
        param_grads.extend(weight_grads);
        param_grads.extend(design_grads);
        Ok(LayerVjp {
            input_grad,
            param_grads,
            measurement_grads,
        })
    }

    pub(crate) fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["step".to_string()];
        names.extend((0..self.model.terms.len()).map(|i| format!("weight[{i}]")));
        for (i, n) in self.model.design_counts().into_iter().enumerate() {
            names.extend((0..n).map(|s| format!("design[{i}][{s}]")));
        }
        names
    }

    pub(crate) fn parameters(&self) -> Vec<f64> {
        let mut p = vec![self.step];
        p.extend(self.model.terms.iter().map(|t| t.weight));
        for t in &self.model.terms {
            if let Some(d) = t.operator.design_view() {
                p.extend_from_slice(d.coefficients);
            }
        }
        p
    }

    /// Rebuilds with new parameters, sharing the forward model when only the step changes.
    pub(crate) fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        let current = self.parameters();
        if values.len() != current.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient layer has {} parameters, got {}",
                current.len(),
                values.len()
            )));
        }
        let n_terms = self.model.terms.len();
        let model = if values[1..] == current[1..] {
            self.model.clone()
        } else {
            let mut model = self.model.with_weights(&values[1..1 + n_terms])?;
            let mut offset = 1 + n_terms;
            for (i, n) in self.model.design_counts().into_iter().enumerate() {
                if n > 0 {
                    model = model.with_design(i, &values[offset..offset + n])?;
                    offset += n;
                }
            }
            Arc::new(model)
        };
        GradientLayer::new(values[0], model, self.measurements.clone())
    }

    pub fn with_step(&self, step: f64) -> Result<Self> {
        GradientLayer::new(step, self.model.clone(), self.measurements.clone())
    }

    pub fn with_measurements(&self, measurements: Arc<Vec<Tensor>>) -> Result<Self> {
        GradientLayer::new(self.step, self.model.clone(), measurements)
    }
}

//! Bijective proximal layers.
//!
//! Both priors are smooth, so the proximal step is a backward-Euler step on
//! `grad P` and its inverse is the explicit forward-Euler step `z = x + grad P(x)`.

use crate::error::{Error, Result};
use crate::fixed_point::{fixed_point_solve, FixedPointConfig};
use crate::numerics::{LinearOperator, OperatorKind, Tensor};

use super::{LayerVjp, OpMeter};

/// Prox of `P(v) = lambda/2 ||v||^2`: `x = z / (1 + lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProxLayer {
    strength: f64,
    shape: Vec<usize>,
}

impl QuadraticProxLayer {
    pub fn new(strength: f64, shape: &[usize]) -> Result<Self> {
        if !(strength.is_finite() && 1.0 + strength > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "quadratic prox strength must satisfy 1 + lambda > 0, got {strength}"
            )));
        }
        Ok(Self {
            strength,
            shape: shape.to_vec(),
        })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn forward(&self, z: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        z.expect_shape(&self.shape, "quadratic prox input")?;
        meter.operator_applications += 1;
        Ok(z.scale(1.0 / (1.0 + self.strength)))
    }

    pub(crate) fn inverse(&self, x: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        x.expect_shape(&self.shape, "quadratic prox output")?;
        meter.operator_applications += 1;
        Ok(x.scale(1.0 + self.strength))
    }

    pub(crate) fn vjp(&self, z: &Tensor, q: &Tensor, meter: &mut OpMeter) -> Result<LayerVjp> {
        z.expect_shape(&self.shape, "quadratic prox input")?;
        q.expect_shape(&self.shape, "quadratic prox cotangent")?;
        meter.operator_applications += 1;
        let d = 1.0 + self.strength;
        let x_out = z.scale(1.0 / d);
        Ok(LayerVjp {
            input_grad: q.scale(1.0 / d),
            param_grads: vec![-x_out.real_dot(q) / d],
            measurement_grads: Vec::new(),
        })
    }

    pub(crate) fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        match values {
            [lambda] => Self::new(*lambda, &self.shape),
            _ => Err(Error::InvalidArgument("quadratic prox has one parameter".into())),
        }
    }
}

/// Prox of `P(v) = lambda/2 ||C v||^2` for a circular convolution `C`:
/// `x` solves `x + lambda C^H C x = z`.
#[derive(Debug, Clone)]
pub struct SmoothProxLayer {
    strength: f64,
    filter: LinearOperator,
    filter_norm: f64,
    inner: FixedPointConfig,
}

impl SmoothProxLayer {
    pub fn new(strength: f64, filter: LinearOperator, inner: FixedPointConfig) -> Result<Self> {
        let OperatorKind::CircularConvolution { kernel } = filter.kind() else {
            return Err(Error::InvalidArgument(
                "smooth prox filter must be a circular convolution".into(),
            ));
        };
        inner.validate()?;
        let filter_norm = circulant_normal_norm(filter.in_shape(), kernel);
        let layer = Self {
            strength,
            filter,
            filter_norm,
            inner,
        };
        layer.check_strength(strength)?;
        Ok(layer)
    }

    fn check_strength(&self, strength: f64) -> Result<()> {
        let rho = strength.abs() * self.filter_norm;
        if !(strength.is_finite() && rho < 1.0) {
            return Err(Error::NotContractive { bound: rho });
        }
        Ok(())
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn filter(&self) -> &LinearOperator {
        &self.filter
    }

    pub fn inner_config(&self) -> &FixedPointConfig {
        &self.inner
    }

    pub fn shape(&self) -> &[usize] {
        self.filter.in_shape()
    }

    /// Exact `sigma_max(C^H C)`.
    pub fn filter_norm(&self) -> f64 {
        self.filter_norm
    }

    /// Contraction factor of the implicit forward solve.
    pub fn contraction(&self) -> f64 {
        self.strength.abs() * self.filter_norm
    }

    fn regularizer_gradient(&self, v: &Tensor) -> Tensor {
        self.filter
            .adjoint_unchecked(&self.filter.forward_unchecked(v))
            .scale(self.strength)
    }

    /// Solves `v + lambda C^H C v = rhs` by iterating `v <- rhs - lambda C^H C v`.
    fn solve(&self, rhs: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        let result = fixed_point_solve(
            |v| Ok(rhs - &self.regularizer_gradient(v)),
            rhs,
            &self.inner,
        )?;
        meter.operator_applications += result.iterations_used as u64;
        meter.fixed_point_inner_iterations += result.iterations_used as u64;
        Ok(result.solution)
    }

    pub(crate) fn forward(&self, z: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        z.expect_shape(self.shape(), "smooth prox input")?;
        self.solve(z, meter)
    }

    pub(crate) fn inverse(&self, x: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        x.expect_shape(self.shape(), "smooth prox output")?;
        meter.operator_applications += 1;
        Ok(x + &self.regularizer_gradient(x))
    }

    /// Implicit differentiation: `u = (I + lambda C^H C)^{-1} q`, then
    /// `dL/dlambda = -Re<C^H C x, u>` at the recomputed output `x`.
    pub(crate) fn vjp(&self, z: &Tensor, q: &Tensor, meter: &mut OpMeter) -> Result<LayerVjp> {
        q.expect_shape(self.shape(), "smooth prox cotangent")?;
        let x_out = self.forward(z, meter)?;
        let u = self.solve(q, meter)?;
        let cx = self.filter.adjoint_unchecked(&self.filter.forward_unchecked(&x_out));
        Ok(LayerVjp {
            param_grads: vec![-cx.real_dot(&u)],
            input_grad: u,
            measurement_grads: Vec::new(),
        })
    }

    pub(crate) fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        match values {
            [lambda] => {
                self.check_strength(*lambda)?;
                Ok(Self {
                    strength: *lambda,
                    ..self.clone()
                })
            }
            _ => Err(Error::InvalidArgument("smooth prox has one parameter".into())),
        }
    }
}

/// Largest eigenvalue of `C^H C` for a circulant `C`: the peak squared magnitude
/// of the (unnormalized) DFT of the zero-padded kernel.
fn circulant_normal_norm(shape: &[usize], kernel: &Tensor) -> f64 {
    let mut padded = Tensor::zeros(shape);
    let kshape = kernel.shape();
    let strides: Vec<usize> = (0..shape.len()).map(|a| shape[a + 1..].iter().product()).collect();
    let kstrides: Vec<usize> = (0..kshape.len()).map(|a| kshape[a + 1..].iter().product()).collect();
    for (j, &v) in kernel.data().iter().enumerate() {
        let flat: usize = kstrides
            .iter()
            .zip(&kshape[..])
            .zip(&strides)
            .map(|((&ks, &kn), &s)| ((j / ks) % kn) * s)
            .sum();
        padded.data_mut()[flat] = v;
    }
    let n = padded.len() as f64;
    let spectrum = LinearOperator::dft(shape)
        .expect("valid shape")
        .forward_unchecked(&padded);
    spectrum
        .data()
        .iter()
        .map(|v| v.norm_sqr() * n)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::estimate_sigma_max;

    #[test]
    fn circulant_norm_matches_power_iteration() {
        let kernel = Tensor::from_real(&[3, 3], &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let op = LinearOperator::circular_convolution(&[8, 8], kernel.clone()).unwrap();
        let exact = circulant_normal_norm(&[8, 8], &kernel);
        assert!((exact - 64.0).abs() < 1e-9, "{exact}");
        let est = estimate_sigma_max(&op, 500, 2).unwrap().value;
        assert!((est - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn strength_outside_contraction_is_rejected() {
        let kernel = Tensor::from_real(&[2], &[1.0, 1.0]).unwrap();
        let op = LinearOperator::circular_convolution(&[4], kernel).unwrap();
        assert!(SmoothProxLayer::new(0.2, op.clone(), FixedPointConfig::new(10)).is_ok());
        let err = SmoothProxLayer::new(0.25, op, FixedPointConfig::new(10)).unwrap_err();
        assert!(matches!(err, Error::NotContractive { .. }));
    }

    #[test]
    fn quadratic_prox_rejects_nonpositive_denominator() {
        assert!(QuadraticProxLayer::new(-1.0, &[2]).is_err());
        assert!(QuadraticProxLayer::new(0.0, &[2]).is_ok());
    }
}

//! A closed family of linear operators with forward and adjoint application.
//!
//! Operators are immutable values. Composition lists factors outermost first, so
//! `compose([mask, dft])` applies the DFT and then the mask.

use std::cell::RefCell;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::tensor::{check_shape, numel, Tensor};
use crate::error::{Error, Result};

/// Relative tolerance of the adjoint self-check run by [`build_operator`].
pub const ADJOINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Identity,
    Diagonal { weights: Tensor },
    /// Unitary DFT over the trailing `axes` dimensions.
    Dft { axes: usize },
    /// Gathers the flat input indices, in order, into a 1-D output.
    Mask { indices: Vec<usize> },
    /// Periodic convolution `y[i] = sum_j k[j] x[i - j]`.
    CircularConvolution { kernel: Tensor },
    /// Stacks `s_c * x` along a new leading coil axis.
    CoilStack { sensitivities: Vec<Tensor> },
    Composition(Vec<LinearOperator>),
    WeightedSum {
        coefficients: Vec<f64>,
        operands: Vec<LinearOperator>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    kind: OperatorKind,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl LinearOperator {
    pub fn identity(shape: &[usize]) -> Result<Self> {
        check_op_shape(shape)?;
        Ok(Self {
            kind: OperatorKind::Identity,
            in_shape: shape.to_vec(),
            out_shape: shape.to_vec(),
        })
    }

    pub fn diagonal(weights: Tensor) -> Self {
        let shape = weights.shape().to_vec();
        Self {
            kind: OperatorKind::Diagonal { weights },
            in_shape: shape.clone(),
            out_shape: shape,
        }
    }

    /// Unitary DFT over every axis of `shape`.
    pub fn dft(shape: &[usize]) -> Result<Self> {
        Self::dft_axes(shape, shape.len())
    }

    /// Unitary DFT over the trailing `axes` axes of `shape`.
    pub fn dft_axes(shape: &[usize], axes: usize) -> Result<Self> {
        check_op_shape(shape)?;
        if axes == 0 || axes > shape.len() {
            return Err(Error::InvalidOperator(format!(
                "dft over {axes} axes of a {}-d shape",
                shape.len()
            )));
        }
        Ok(Self {
            kind: OperatorKind::Dft { axes },
            in_shape: shape.to_vec(),
            out_shape: shape.to_vec(),
        })
    }

    pub fn mask(in_shape: &[usize], indices: Vec<usize>) -> Result<Self> {
        check_op_shape(in_shape)?;
        let n = numel(in_shape);
        if indices.is_empty() {
            return Err(Error::InvalidOperator("mask selects no entries".into()));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(Error::InvalidOperator(format!(
                    "mask index {i} out of range for {n} entries"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidOperator(format!("mask index {i} repeated")));
            }
        }
        let out_shape = vec![indices.len()];
        Ok(Self {
            kind: OperatorKind::Mask { indices },
            in_shape: in_shape.to_vec(),
            out_shape,
        })
    }

    pub fn circular_convolution(in_shape: &[usize], kernel: Tensor) -> Result<Self> {
        check_op_shape(in_shape)?;
        let ks = kernel.shape();
        if ks.len() != in_shape.len() || ks.iter().zip(in_shape).any(|(k, n)| k > n) {
            return Err(Error::InvalidOperator(format!(
                "kernel shape {ks:?} does not fit signal shape {in_shape:?}"
            )));
        }
        Ok(Self {
            kind: OperatorKind::CircularConvolution { kernel },
            in_shape: in_shape.to_vec(),
            out_shape: in_shape.to_vec(),
        })
    }

    pub fn coil_stack(sensitivities: Vec<Tensor>) -> Result<Self> {
        let Some(first) = sensitivities.first() else {
            return Err(Error::InvalidOperator("coil stack needs at least one map".into()));
        };
        let shape = first.shape().to_vec();
        if let Some(bad) = sensitivities.iter().find(|s| s.shape() != shape.as_slice()) {
            return Err(Error::shape("coil sensitivity", &shape, bad.shape()));
        }
        let mut out_shape = vec![sensitivities.len()];
        out_shape.extend_from_slice(&shape);
        Ok(Self {
            kind: OperatorKind::CoilStack { sensitivities },
            in_shape: shape,
            out_shape,
        })
    }

    /// `ops[0] ∘ ops[1] ∘ ...`; the last factor is applied first.
    pub fn compose(ops: Vec<LinearOperator>) -> Result<Self> {
        let (Some(first), Some(last)) = (ops.first(), ops.last()) else {
            return Err(Error::InvalidOperator("empty composition".into()));
        };
        for (i, pair) in ops.windows(2).enumerate() {
            if pair[0].in_shape != pair[1].out_shape {
                return Err(Error::InvalidOperator(format!(
                    "composition chain breaks between factors {i} and {}: {:?} vs {:?}",
                    i + 1,
                    pair[0].in_shape,
                    pair[1].out_shape
                )));
            }
        }
        let in_shape = last.in_shape.clone();
        let out_shape = first.out_shape.clone();
        Ok(Self {
            kind: OperatorKind::Composition(ops),
            in_shape,
            out_shape,
        })
    }

    pub fn weighted_sum(coefficients: Vec<f64>, operands: Vec<LinearOperator>) -> Result<Self> {
        if operands.is_empty() || coefficients.len() != operands.len() {
            return Err(Error::InvalidOperator(format!(
                "weighted sum needs matching non-empty coefficient and operand lists ({} vs {})",
                coefficients.len(),
                operands.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidOperator("non-finite weighted-sum coefficient".into()));
        }
        let in_shape = operands[0].in_shape.clone();
        let out_shape = operands[0].out_shape.clone();
        for op in &operands[1..] {
            if op.in_shape != in_shape || op.out_shape != out_shape {
                return Err(Error::InvalidOperator(format!(
                    "weighted-sum operands disagree: {:?}->{:?} vs {:?}->{:?}",
                    in_shape, out_shape, op.in_shape, op.out_shape
                )));
            }
        }
        Ok(Self {
            kind: OperatorKind::WeightedSum {
                coefficients,
                operands,
            },
            in_shape,
            out_shape,
        })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// `A x`.
    pub fn apply_forward(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape(&self.in_shape, "operator forward input")?;
        Ok(self.forward_unchecked(x))
    }

    /// `A^H y`.
    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_shape(&self.out_shape, "operator adjoint input")?;
        Ok(self.adjoint_unchecked(y))
    }

    /// `A^H A x`.
    pub fn apply_normal(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply_forward(x)?;
        Ok(self.adjoint_unchecked(&y))
    }

    pub(crate) fn forward_unchecked(&self, x: &Tensor) -> Tensor {
        match &self.kind {
            OperatorKind::Identity => x.clone(),
            OperatorKind::Diagonal { weights } => weights.hadamard(x),
            OperatorKind::Dft { axes } => dft_nd(x, *axes, false),
            OperatorKind::Mask { indices } => {
                let data = indices.iter().map(|&i| x.data()[i]).collect();
                Tensor::new(self.out_shape.clone(), data).expect("mask output shape")
            }
            OperatorKind::CircularConvolution { kernel } => convolve(x, kernel, false),
            OperatorKind::CoilStack { sensitivities } => {
                let mut data = Vec::with_capacity(numel(&self.out_shape));
                for s in sensitivities {
                    data.extend(s.data().iter().zip(x.data()).map(|(a, b)| a * b));
                }
                Tensor::new(self.out_shape.clone(), data).expect("coil stack output shape")
            }
            OperatorKind::Composition(ops) => {
                let mut ops = ops.iter().rev();
                let mut acc = ops.next().expect("non-empty").forward_unchecked(x);
                for op in ops {
                    acc = op.forward_unchecked(&acc);
                }
                acc
            }
            OperatorKind::WeightedSum {
                coefficients,
                operands,
            } => {
                let mut acc = operands[0].forward_unchecked(x).scale(coefficients[0]);
                for (c, op) in coefficients.iter().zip(operands).skip(1) {
                    acc.axpy(*c, &op.forward_unchecked(x));
                }
                acc
            }
        }
    }

    pub(crate) fn adjoint_unchecked(&self, y: &Tensor) -> Tensor {
        match &self.kind {
            OperatorKind::Identity => y.clone(),
            OperatorKind::Diagonal { weights } => weights.zip_map(y, |w, v| w.conj() * v),
            OperatorKind::Dft { axes } => dft_nd(y, *axes, true),
            OperatorKind::Mask { indices } => {
                let mut out = Tensor::zeros(&self.in_shape);
                let data = out.data_mut();
                for (&i, &v) in indices.iter().zip(y.data()) {
                    data[i] = v;
                }
                out
            }
            OperatorKind::CircularConvolution { kernel } => convolve(y, kernel, true),
            OperatorKind::CoilStack { sensitivities } => {
                let n = numel(&self.in_shape);
                let mut out = Tensor::zeros(&self.in_shape);
                for (c, s) in sensitivities.iter().enumerate() {
                    let coil = &y.data()[c * n..(c + 1) * n];
                    for ((o, w), v) in out.data_mut().iter_mut().zip(s.data()).zip(coil) {
                        *o += w.conj() * v;
                    }
                }
                out
            }
            OperatorKind::Composition(ops) => {
                let mut ops = ops.iter();
                let mut acc = ops.next().expect("non-empty").adjoint_unchecked(y);
                for op in ops {
                    acc = op.adjoint_unchecked(&acc);
                }
                acc
            }
            OperatorKind::WeightedSum {
                coefficients,
                operands,
            } => {
                let mut acc = operands[0].adjoint_unchecked(y).scale(coefficients[0]);
                for (c, op) in coefficients.iter().zip(operands).skip(1) {
                    acc.axpy(*c, &op.adjoint_unchecked(y));
                }
                acc
            }
        }
    }

    /// Worst relative adjoint mismatch `|<Au,v> - <u,A^H v>| / (||Au|| ||v||)` over `trials`
    /// seeded random pairs.
    pub fn adjoint_mismatch(&self, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let u = Tensor::random_uniform(&self.in_shape, &mut rng);
            let v = Tensor::random_uniform(&self.out_shape, &mut rng);
            let au = self.forward_unchecked(&u);
            let ahv = self.adjoint_unchecked(&v);
            let scale = au.norm() * v.norm();
            if scale == 0.0 {
                continue;
            }
            worst = worst.max((au.dot(&v) - u.dot(&ahv)).norm() / scale);
        }
        worst
    }

    /// Leading weighted-sum factor of a design-parameterized operator.
    ///
    /// Matches `WeightedSum` itself and `Composition([WeightedSum, R...])`.
    pub fn design_view(&self) -> Option<DesignView<'_>> {
        match &self.kind {
            OperatorKind::WeightedSum {
                coefficients,
                operands,
            } => Some(DesignView {
                coefficients,
                operands,
                right: &[],
            }),
            OperatorKind::Composition(ops) => match &ops[0].kind {
                OperatorKind::WeightedSum {
                    coefficients,
                    operands,
                } => Some(DesignView {
                    coefficients,
                    operands,
                    right: &ops[1..],
                }),
                _ => None,
            },
            _ => None,
        }
    }

    /// Copy of this operator with the leading weighted-sum coefficients replaced.
    pub fn with_design_coefficients(&self, coefficients: &[f64]) -> Result<Self> {
        let replace = |ws: &LinearOperator| -> Result<LinearOperator> {
            match &ws.kind {
                OperatorKind::WeightedSum { operands, .. } => {
                    LinearOperator::weighted_sum(coefficients.to_vec(), operands.clone())
                }
                _ => unreachable!(),
            }
        };
        match &self.kind {
            OperatorKind::WeightedSum { .. } => replace(self),
            OperatorKind::Composition(ops) if matches!(ops[0].kind, OperatorKind::WeightedSum { .. }) => {
                let mut ops = ops.clone();
                ops[0] = replace(&ops[0])?;
                LinearOperator::compose(ops)
            }
            _ => Err(Error::InvalidOperator(
                "operator has no design coefficients".into(),
            )),
        }
    }
}

/// Factorization `A = (sum_s c_s B_s) ∘ R` exposed for design gradients.
#[derive(Debug, Clone, Copy)]
pub struct DesignView<'a> {
    pub coefficients: &'a [f64],
    pub operands: &'a [LinearOperator],
    right: &'a [LinearOperator],
}

impl DesignView<'_> {
    /// `R x`.
    pub fn apply_right(&self, x: &Tensor) -> Tensor {
        let mut acc = x.clone();
        for op in self.right.iter().rev() {
            acc = op.forward_unchecked(&acc);
        }
        acc
    }

    /// `[B_s R x]_s`, the partial derivatives of `A x` in each coefficient.
    pub fn partials(&self, x: &Tensor) -> Vec<Tensor> {
        let rx = self.apply_right(x);
        self.operands.iter().map(|b| b.forward_unchecked(&rx)).collect()
    }
}

fn check_op_shape(shape: &[usize]) -> Result<()> {
    check_shape(shape).map_err(|e| Error::InvalidOperator(e.to_string()))
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unitary DFT (or its inverse) along the trailing `axes` axes.
fn dft_nd(x: &Tensor, axes: usize, inverse: bool) -> Tensor {
    let shape = x.shape().to_vec();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut scale = 1.0;
    let mut line = Vec::new();
    for axis in shape.len() - axes..shape.len() {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        scale *= len as f64;
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let fft = plan(len, inverse);
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        line.resize(len, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[base + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[base + i * stride] = *v;
                }
            }
        }
    }
    let norm = 1.0 / scale.sqrt();
    for v in data.iter_mut() {
        *v *= norm;
    }
    out
}

/// Circular convolution with `kernel`, or its adjoint (correlation with the conjugate kernel).
fn convolve(x: &Tensor, kernel: &Tensor, adjoint: bool) -> Tensor {
    let shape = x.shape();
    let kshape = kernel.shape();
    let mut out = Tensor::zeros(shape);
    let mut tap = vec![0usize; kshape.len()];
    for &k in kernel.data() {
        if k != Complex64::new(0.0, 0.0) {
            let coef = if adjoint { k.conj() } else { k };
            accumulate_shifted(out.data_mut(), x.data(), shape, &tap, coef, adjoint);
        }
        // odometer over kernel taps, last axis fastest
        for a in (0..kshape.len()).rev() {
            tap[a] += 1;
            if tap[a] < kshape[a] {
                break;
            }
            tap[a] = 0;
        }
    }
    out
}

/// `dst[i] += coef * src[i - shift]` (or `src[i + shift]` when `reverse`), periodic in every axis.
fn accumulate_shifted(
    dst: &mut [Complex64],
    src: &[Complex64],
    shape: &[usize],
    shift: &[usize],
    coef: Complex64,
    reverse: bool,
) {
    let maps: Vec<Vec<usize>> = shape
        .iter()
        .zip(shift)
        .enumerate()
        .map(|(a, (&n, &s))| {
            let stride: usize = shape[a + 1..].iter().product();
            (0..n)
                .map(|i| {
                    let j = if reverse { (i + s) % n } else { (i + n - s % n) % n };
                    j * stride
                })
                .collect()
        })
        .collect();
    let strides: Vec<usize> = (0..shape.len())
        .map(|a| shape[a + 1..].iter().product())
        .collect();

    fn rec(
        axis: usize,
        dst_off: usize,
        src_off: usize,
        dst: &mut [Complex64],
        src: &[Complex64],
        maps: &[Vec<usize>],
        strides: &[usize],
        coef: Complex64,
    ) {
        let map = &maps[axis];
        if axis + 1 == maps.len() {
            for (i, &m) in map.iter().enumerate() {
                dst[dst_off + i] += coef * src[src_off + m];
            }
        } else {
            for (i, &m) in map.iter().enumerate() {
                rec(axis + 1, dst_off + i * strides[axis], src_off + m, dst, src, maps, strides, coef);
            }
        }
    }
    rec(0, 0, 0, dst, src, &maps, &strides, coef);
}

/// Serializable operator description accepted by [`build_operator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity {
        shape: Vec<usize>,
    },
    Diagonal {
        weights: Tensor,
    },
    Dft {
        shape: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        axes: Option<usize>,
    },
    Mask {
        in_shape: Vec<usize>,
        indices: Vec<usize>,
    },
    CircularConvolution {
        in_shape: Vec<usize>,
        kernel: Tensor,
    },
    CoilStack {
        sensitivities: Vec<Tensor>,
    },
    Composition {
        operators: Vec<OperatorSpec>,
    },
    WeightedSum {
        coefficients: Vec<f64>,
        operands: Vec<OperatorSpec>,
    },
}

/// Builds an operator from its description; with `validate`, also runs the adjoint self-check.
pub fn build_operator(spec: &OperatorSpec, validate: bool) -> Result<LinearOperator> {
    let op = build(spec)?;
    if validate {
        let mismatch = op.adjoint_mismatch(4, 0x0ad7);
        if !(mismatch <= ADJOINT_TOLERANCE) {
            return Err(Error::InvalidOperator(format!(
                "adjoint self-check failed: relative mismatch {mismatch:e}"
            )));
        }
    }
    Ok(op)
}

fn build(spec: &OperatorSpec) -> Result<LinearOperator> {
    Ok(match spec {
        OperatorSpec::Identity { shape } => LinearOperator::identity(shape)?,
        OperatorSpec::Diagonal { weights } => LinearOperator::diagonal(weights.clone()),
        OperatorSpec::Dft { shape, axes } => {
            LinearOperator::dft_axes(shape, axes.unwrap_or(shape.len()))?
        }
        OperatorSpec::Mask { in_shape, indices } => {
            LinearOperator::mask(in_shape, indices.clone())?
        }
        OperatorSpec::CircularConvolution { in_shape, kernel } => {
            LinearOperator::circular_convolution(in_shape, kernel.clone())?
        }
        OperatorSpec::CoilStack { sensitivities } => {
            LinearOperator::coil_stack(sensitivities.clone())?
        }
        OperatorSpec::Composition { operators } => {
            LinearOperator::compose(operators.iter().map(build).collect::<Result<_>>()?)?
        }
        OperatorSpec::WeightedSum {
            coefficients,
            operands,
        } => LinearOperator::weighted_sum(
            coefficients.clone(),
            operands.iter().map(build).collect::<Result<_>>()?,
        )?,
    })
}

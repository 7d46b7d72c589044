//! Power-iteration estimates of the largest eigenvalue of `A^H A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::operator::LinearOperator;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    /// Estimate of `sigma_max(A^H A)`, i.e. the squared largest singular value of `A`.
    pub value: f64,
    /// Set when the iterate collapsed to zero: the operator annihilated the start vector.
    pub degenerate: bool,
    pub iterations: usize,
}

/// Estimates `sigma_max(A^H A)` with `iters` power iterations from a seeded random start.
///
/// The returned value is the largest Rayleigh quotient seen, so it never decreases as
/// `iters` grows for a fixed seed, and it never exceeds the true value (up to rounding).
pub fn estimate_sigma_max(op: &LinearOperator, iters: usize, seed: u64) -> Result<SpectralEstimate> {
    power_iteration(op.in_shape(), iters, seed, |v| op.adjoint_unchecked(&op.forward_unchecked(v)))
}

/// Power iteration for a Hermitian positive semidefinite map given as a closure.
pub fn power_iteration(
    shape: &[usize],
    iters: usize,
    seed: u64,
    apply: impl Fn(&Tensor) -> Tensor,
) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::InvalidArgument("power iteration needs iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Tensor::random_uniform(shape, &mut rng);
    let n0 = v.norm();
    v = v.scale(1.0 / n0);
    let mut best: f64 = 0.0;
    for it in 1..=iters {
        let w = apply(&v);
        best = best.max(v.real_dot(&w));
        let nw = w.norm();
        if nw == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                degenerate: true,
                iterations: it,
            });
        }
        v = w.scale(1.0 / nw);
    }
    Ok(SpectralEstimate {
        value: best,
        degenerate: false,
        iterations: iters,
    })
}

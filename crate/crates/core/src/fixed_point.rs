//! Fixed-point iteration for contraction maps, used to invert gradient and
//! residual layers and to solve implicit proximal steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    /// Iteration budget `T`.
    pub max_iters: usize,
    /// Early exit once the update norm drops below this. Zero runs exactly `max_iters` steps.
    pub tolerance: f64,
    pub record_trace: bool,
}

impl FixedPointConfig {
    pub fn new(max_iters: usize) -> Self {
        Self {
            max_iters,
            tolerance: 0.0,
            record_trace: false,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("fixed-point max_iters must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fixed-point tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub solution: Tensor,
    pub iterations_used: usize,
    /// `||x_t - x_{t-1}||` of the last step taken.
    pub final_update_norm: f64,
    pub trace: Option<Vec<f64>>,
}

/// Iterates `x <- map(x)` from `x_0 = z` for at most `cfg.max_iters` steps.
///
/// A non-finite iterate aborts with [`Error::Divergence`] naming the (1-based) step.
pub fn fixed_point_solve<F>(map: F, z: &Tensor, cfg: &FixedPointConfig) -> Result<FixedPointResult>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let mut x = z.clone();
    let mut trace = cfg.record_trace.then(|| Vec::with_capacity(cfg.max_iters));
    let mut update_norm = 0.0;
    let mut used = 0;
    for t in 1..=cfg.max_iters {
        let next = map(&x)?;
        if !next.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }
        next.expect_shape(z.shape(), "fixed-point iterate")?;
        update_norm = (&next - &x).norm();
        x = next;
        used = t;
        if let Some(trace) = trace.as_mut() {
            trace.push(update_norm);
        }
        if update_norm < cfg.tolerance {
            break;
        }
    }
    Ok(FixedPointResult {
        solution: x,
        iterations_used: used,
        final_update_norm: update_norm,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionVerdict {
    pub accepted: bool,
    pub bound: f64,
    /// `1 - bound`; negative when rejected.
    pub margin: f64,
}

/// Accepts iff `lipschitz_bound < 1`.
pub fn check_contraction(lipschitz_bound: f64) -> ContractionVerdict {
    ContractionVerdict {
        accepted: lipschitz_bound.is_finite() && lipschitz_bound < 1.0,
        bound: lipschitz_bound,
        margin: 1.0 - lipschitz_bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(Complex64::new(v, 0.0))
    }

    fn affine(a: f64, b: f64) -> impl Fn(&Tensor) -> Result<Tensor> {
        move |x: &Tensor| Ok(x.map(|v| v * a + b))
    }

    #[test]
    fn geometric_series_three_steps() {
        let r = fixed_point_solve(affine(0.5, 1.0), &s(1.0), &FixedPointConfig::new(3)).unwrap();
        assert_eq!(r.solution.data()[0].re, 1.875);
        assert_eq!(r.iterations_used, 3);
        assert_eq!(r.final_update_norm, 0.125);
    }

    #[test]
    fn constant_map_returns_z_with_zero_update() {
        let z = s(3.5);
        let zc = z.clone();
        let r = fixed_point_solve(move |_| Ok(zc.clone()), &z, &FixedPointConfig::new(1)).unwrap();
        assert_eq!(r.solution, z);
        assert_eq!(r.final_update_norm, 0.0);
    }

    #[test]
    fn twenty_steps_of_point_nine() {
        // x <- z + 0.9 x, z = 1, fixed point 10; error 9 * 0.9^20
        let r = fixed_point_solve(affine(0.9, 1.0), &s(1.0), &FixedPointConfig::new(20)).unwrap();
        let err = (r.solution.data()[0].re - 10.0).abs();
        assert!((err - 9.0 * 0.9f64.powi(20)).abs() < 1e-12, "{err}");
        assert!((err - 1.094).abs() < 1e-3);
    }

    #[test]
    fn early_exit_respects_tolerance() {
        let cfg = FixedPointConfig::new(1000).with_tolerance(1e-6).with_trace();
        let r = fixed_point_solve(affine(0.5, 1.0), &s(0.0), &cfg).unwrap();
        assert!(r.iterations_used < 1000);
        assert!(r.final_update_norm < 1e-6);
        assert_eq!(r.trace.unwrap().len(), r.iterations_used);
    }

    #[test]
    fn divergence_names_iteration() {
        let err = fixed_point_solve(
            |x: &Tensor| Ok(x.map(|v| if v.re > 1e300 { v * f64::INFINITY } else { v * 1e200 })),
            &s(1.0),
            &FixedPointConfig::new(5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 2 }), "{err:?}");
    }

    #[test]
    fn trace_ratio_approaches_contraction_factor() {
        let cfg = FixedPointConfig::new(12).with_trace();
        let r = fixed_point_solve(affine(0.7, 2.0), &s(0.0), &cfg).unwrap();
        let trace = r.trace.unwrap();
        assert!((trace[10] / trace[9] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn contraction_verdicts() {
        let v = check_contraction(0.5);
        assert!(v.accepted);
        assert_eq!(v.margin, 0.5);
        assert!(!check_contraction(1.0).accepted);
        assert!(!check_contraction(f64::NAN).accepted);
        // alpha = 0.2 with sigma_max(A^H A) = 4
        assert!(check_contraction(0.2 * 4.0).accepted);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(FixedPointConfig::new(0).validate().is_err());
        assert!(FixedPointConfig::new(1).with_tolerance(-1.0).validate().is_err());
    }
}

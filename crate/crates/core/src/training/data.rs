//! Synthetic data, measurement simulation, loss and metrics.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{LinearOperator, Tensor};

/// `y = A x_gt + n` with `n` complex Gaussian, std `noise_std` per real component.
pub fn simulate_measurements(a: &LinearOperator, x_gt: &Tensor, noise_std: f64, seed: u64) -> Result<Tensor> {
    let clean = a.apply_forward(x_gt)?;
    let noise = complex_noise(a.out_shape(), noise_std, seed)?;
    Ok(&clean + &noise)
}

pub fn complex_noise(shape: &[usize], std: f64, seed: u64) -> Result<Tensor> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::random_normal(shape, std, &mut rng))
}

/// `(1/2 ||x_n - x_gt||^2, x_n - x_gt)`.
pub fn loss_mse(x_n: &Tensor, x_gt: &Tensor) -> Result<(f64, Tensor)> {
    x_n.expect_shape(x_gt.shape(), "loss input")?;
    let q = x_n - x_gt;
    Ok((0.5 * q.norm_sqr(), q))
}

/// `||a - b|| / ||b||`.
pub fn metric_nrmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape(b.shape(), "nrmse input")?;
    let denom = b.norm();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((a - b).norm() / denom)
}

/// Smooth complex phantom: white Gaussian noise low-passed with a Gaussian
/// frequency response of width `bandwidth` (cycles per image), scaled to unit peak.
pub fn smooth_phantom(shape: &[usize], bandwidth: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let &[h, w] = shape else {
        return Err(Error::InvalidArgument(format!("phantoms are 2-D, got {shape:?}")));
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(normal.sample(rng), 0.3 * normal.sample(rng)))
        .collect();
    let dft = LinearOperator::dft(shape)?;
    let spectrum = dft.forward_unchecked(&Tensor::new(shape.to_vec(), white)?);
    let freq = |i: usize, n: usize| -> f64 {
        let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        f / bandwidth
    };
    let mut filtered = spectrum;
    for (idx, v) in filtered.data_mut().iter_mut().enumerate() {
        let (fy, fx) = (freq(idx / w, h), freq(idx % w, w));
        *v *= (-0.5 * (fy * fy + fx * fx)).exp();
    }
    let img = dft.adjoint_unchecked(&filtered);
    let peak = img.max_abs();
    Ok(if peak > 0.0 { img.scale(1.0 / peak) } else { img })
}

#![allow(dead_code)]

use std::sync::Arc;

use num_complex::Complex64;
use pbnet::fixed_point::FixedPointConfig;
use pbnet::layers::{
    constrain_lipschitz, ConvBank, ForwardModel, GradientLayer, Layer, QuadraticProxLayer, ResidualLayer,
    SmoothProxLayer,
};
use pbnet::network::{Network, StoragePolicy};
use pbnet::layers::{layer_forward, layer_vjp};
use pbnet::numerics::{LinearOperator, Tensor};
use pbnet::training::sr_forward_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_real(&[1], &[v]).unwrap()
}

pub fn re(t: &Tensor) -> f64 {
    t.data()[0].re
}

/// `A = I`, `c = [1]`, `y = 0` on a single entry.
pub fn scalar_gradient(alpha: f64) -> Layer {
    let model = ForwardModel::single(LinearOperator::identity(&[1]).unwrap());
    GradientLayer::new(alpha, Arc::new(model), Arc::new(vec![scalar(0.0)]))
        .unwrap()
        .into()
}

/// Gradient layer over `mask . dft` with roughly half the frequencies kept, so
/// `sigma_max(A^H A) = 1` and the contraction factor equals `rho`.
pub fn masked_dft_gradient(shape: &[usize], rho: f64, seed: u64) -> Layer {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut keep: Vec<usize> = (0..n).filter(|_| r.random_bool(0.5)).collect();
    if keep.is_empty() {
        keep.push(0);
    }
    let m = keep.len();
    let op = LinearOperator::compose(vec![
        LinearOperator::mask(shape, keep).unwrap(),
        LinearOperator::dft(shape).unwrap(),
    ])
    .unwrap();
    let y = Tensor::random_normal(&[m], 1.0, &mut r);
    GradientLayer::new(rho, Arc::new(ForwardModel::single(op)), Arc::new(vec![y]))
        .unwrap()
        .into()
}

/// Gradient layer over a diagonal operator with `max |w| = 1`.
pub fn diagonal_gradient(shape: &[usize], rho: f64, seed: u64) -> Layer {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    w[0] = 1.0;
    let op = LinearOperator::diagonal(Tensor::from_real(shape, &w).unwrap());
    let y = Tensor::random_normal(shape, 1.0, &mut r);
    GradientLayer::new(rho, Arc::new(ForwardModel::single(op)), Arc::new(vec![y]))
        .unwrap()
        .into()
}

pub fn laplacian(shape: &[usize]) -> LinearOperator {
    let k = Tensor::from_real(&[3, 3], &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    LinearOperator::circular_convolution(shape, k).unwrap()
}

/// Smooth prox with contraction `lambda * ||C^H C|| = frac`.
pub fn smooth_prox(shape: &[usize], frac: f64, inner: usize) -> Layer {
    let probe = SmoothProxLayer::new(0.0, laplacian(shape), FixedPointConfig::new(inner)).unwrap();
    let lambda = frac / probe.filter_norm();
    SmoothProxLayer::new(lambda, laplacian(shape), FixedPointConfig::new(inner))
        .unwrap()
        .into()
}

pub fn quadratic_prox(shape: &[usize], lambda: f64) -> Layer {
    QuadraticProxLayer::new(lambda, shape).unwrap().into()
}

/// Random 3x3 residual layer rescaled to Lipschitz bound `budget`.
pub fn residual(shape: &[usize], hidden: usize, budget: f64, seed: u64) -> Layer {
    let mut r = rng(seed);
    let w1 = ConvBank::random(hidden, 2, 3, 3, 0.5, &mut r).unwrap();
    let w2 = ConvBank::random(2, hidden, 3, 3, 0.5, &mut r).unwrap();
    let layer = ResidualLayer::new(w1, w2, budget, shape).unwrap();
    let (layer, _) = constrain_lipschitz(&layer);
    layer.into()
}

/// Residual layer whose bound sits exactly at `budget` (the random draw always exceeds it).
pub fn residual_at(shape: &[usize], budget: f64, seed: u64) -> Layer {
    let l = residual(shape, 4, budget, seed);
    let Layer::Residual(r) = &l else { unreachable!() };
    assert!((r.lipschitz_bound() - budget).abs() < 1e-9 * budget);
    l
}

/// `n` layers cycling gradient, smooth prox, gradient, residual, gradient, quadratic prox.
pub fn mixed_layers(shape: &[usize], n: usize, rho: f64, seed: u64) -> Vec<Layer> {
    (0..n)
        .map(|k| {
            let s = seed.wrapping_mul(1000).wrapping_add(k as u64);
            match k % 6 {
                0 | 2 | 4 => masked_dft_gradient(shape, rho, s),
                1 => smooth_prox(shape, 0.5, 80),
                3 => residual(shape, 4, rho, s),
                _ => quadratic_prox(shape, 0.3),
            }
        })
        .collect()
}

pub fn mixed_network(shape: &[usize], n: usize, rho: f64, seed: u64, policy: StoragePolicy) -> Network {
    Network::new(mixed_layers(shape, n, rho, seed), policy).unwrap()
}

pub fn random_complex(shape: &[usize], seed: u64) -> Tensor {
    Tensor::random_normal(shape, 1.0, &mut rng(seed))
}

/// Gradient of `x -> Re<f(x), q>` by central differences in every real and imaginary coordinate.
pub fn fd_input_gradient(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, q: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut parts = [0.0; 2];
        for (p, dir) in parts.iter_mut().zip([Complex64::new(h, 0.0), Complex64::new(0.0, h)]) {
            let mut xp = x.clone();
            xp.data_mut()[i] += dir;
            let mut xm = x.clone();
            xm.data_mut()[i] -= dir;
            *p = (&f(&xp) - &f(&xm)).real_dot(q) / (2.0 * h);
        }
        out.data_mut()[i] = Complex64::new(parts[0], parts[1]);
    }
    out
}

/// Derivatives of `theta -> g(theta)` by central differences.
pub fn fd_params(g: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|j| {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += h;
            tm[j] -= h;
            (g(&tp) - g(&tm)) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |b|`.
pub fn normwise(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.data().iter().flat_map(|c| [c.re, c.im]).collect()
}

pub fn rel(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).norm() / b.norm()
}

/// A gradient layer with two design-multiplexed fidelity terms.
pub fn design_gradient(seed: u64) -> Layer {
    let mut r = rng(seed);
    let design: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| r.random_range(0.1..1.0)).collect()).collect();
    let model = sr_forward_model(8, 4, &design).unwrap();
    let ys = model
        .terms()
        .iter()
        .map(|t| Tensor::random_normal(t.operator.out_shape(), 1.0, &mut r))
        .collect();
    let model = Arc::new(model);
    let alpha = 0.4 / model.sigma_max();
    GradientLayer::new(alpha, model, Arc::new(ys)).unwrap().into()
}

pub fn all_kinds(seed: u64) -> Vec<Layer> {
    let s = [8, 8];
    vec![
        masked_dft_gradient(&s, 0.6, seed),
        design_gradient(seed),
        quadratic_prox(&s, 0.7),
        smooth_prox(&s, 0.5, 80),
        residual(&s, 4, 0.8, seed),
    ]
}

/// VJP of every kind against central differences of the forward map, over inputs and parameters.
pub fn check_vjp_fd(layer: &Layer, seed: u64) -> (f64, f64) {
    let h = 1e-6;
    let x = random_complex(&[8, 8], seed.wrapping_add(100));
    let q = random_complex(&[8, 8], seed.wrapping_add(200));
    let vjp = layer_vjp(layer, &x, &q).unwrap();
    let fd_in = fd_input_gradient(|v| layer_forward(layer, v).unwrap(), &x, &q, h);
    let in_err = normwise(&flat(&vjp.input_grad), &flat(&fd_in));
    let fd_p = fd_params(
        |theta| layer_forward(&layer.with_parameters(theta).unwrap(), &x).unwrap().real_dot(&q),
        &layer.parameters(),
        h,
    );
    assert_eq!(vjp.param_grads.len(), layer.parameter_names().len());
    (in_err, normwise(&vjp.param_grads, &fd_p))
}


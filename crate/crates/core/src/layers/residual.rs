//! Invertible residual block `v = x + W2 sigma(W1 x)`.
//!
//! Complex images enter as two real channels (real, imaginary). The banks are
//! multichannel circular correlations with centered kernels, and `sigma` is a
//! shifted softplus with derivative in (0, 1), so `Lip(g) <= ||W1|| ||W2||`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fixed_point::{check_contraction, fixed_point_solve, FixedPointConfig};
use crate::numerics::Tensor;

use super::{LayerVjp, OpMeter};

/// Relative slack when deciding whether a bank pair is already within budget.
const BUDGET_SLACK: f64 = 1e-12;

/// Bank of `out x in` real kernels of size `kh x kw`, stored `[o][i][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
}

impl ConvBank {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, weights: Vec<f64>) -> Result<Self> {
        if out_ch * in_ch * kh * kw == 0 || weights.len() != out_ch * in_ch * kh * kw {
            return Err(Error::InvalidArgument(format!(
                "conv bank {out_ch}x{in_ch}x{kh}x{kw} cannot hold {} weights",
                weights.len()
            )));
        }
        if out_ch.min(in_ch) > 2 {
            return Err(Error::InvalidArgument(
                "conv bank spectral norm needs at most two input or output channels".into(),
            ));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kh,
            kw,
            weights,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let weights = (0..out_ch * in_ch * kh * kw).map(|_| normal.sample(rng)).collect();
        Self::new(out_ch, in_ch, kh, kw, weights)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(out_ch, in_ch, kh, kw, vec![0.0; out_ch * in_ch * kh * kw])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * s).collect(),
            ..self.clone()
        }
    }

    fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        Self::new(self.out_ch, self.in_ch, self.kh, self.kw, weights.to_vec())
    }

    fn k(&self, o: usize, i: usize, dy: usize, dx: usize) -> f64 {
        self.weights[((o * self.in_ch + i) * self.kh + dy) * self.kw + dx]
    }

    /// Wrapped row/column offsets for tap `(dy, dx)`: position `p` reads `p + d - c`.
    fn tap_maps(&self, h: usize, w: usize, dy: usize, dx: usize) -> (Vec<usize>, Vec<usize>) {
        let (cy, cx) = (self.kh / 2, self.kw / 2);
        let rows = (0..h).map(|y| (y + dy + h * self.kh - cy) % h).collect();
        let cols = (0..w).map(|x| (x + dx + w * self.kw - cx) % w).collect();
        (rows, cols)
    }

    /// `out[o] = sum_i k[o,i] (*) in[i]`.
    pub fn apply(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        debug_assert_eq!(input.len(), self.in_ch * hw);
        let mut out = vec![0.0; self.out_ch * hw];
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (rows, cols) = self.tap_maps(h, w, dy, dx);
                for o in 0..self.out_ch {
                    for i in 0..self.in_ch {
                        let k = self.k(o, i, dy, dx);
                        if k == 0.0 {
                            continue;
                        }
                        let src = &input[i * hw..(i + 1) * hw];
                        let dst = &mut out[o * hw..(o + 1) * hw];
                        for (y, &ry) in rows.iter().enumerate() {
                            let d = &mut dst[y * w..(y + 1) * w];
                            let s = &src[ry * w..(ry + 1) * w];
                            for (dv, &cx) in d.iter_mut().zip(&cols) {
                                *dv += k * s[cx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvBank::apply`].
    pub fn apply_transpose(&self, grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        debug_assert_eq!(grad_out.len(), self.out_ch * hw);
        let mut out = vec![0.0; self.in_ch * hw];
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (rows, cols) = self.tap_maps(h, w, dy, dx);
                for o in 0..self.out_ch {
                    for i in 0..self.in_ch {
                        let k = self.k(o, i, dy, dx);
                        if k == 0.0 {
                            continue;
                        }
                        let src = &grad_out[o * hw..(o + 1) * hw];
                        let dst = &mut out[i * hw..(i + 1) * hw];
                        for (y, &ry) in rows.iter().enumerate() {
                            let s = &src[y * w..(y + 1) * w];
                            let d = &mut dst[ry * w..(ry + 1) * w];
                            for (&sv, &cx) in s.iter().zip(&cols) {
                                d[cx] += k * sv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient of `<grad_out, apply(input)>` with respect to the weights.
    pub fn kernel_gradient(&self, input: &[f64], grad_out: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut grad = vec![0.0; self.weights.len()];
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let (rows, cols) = self.tap_maps(h, w, dy, dx);
                for o in 0..self.out_ch {
                    for i in 0..self.in_ch {
                        let src = &input[i * hw..(i + 1) * hw];
                        let g = &grad_out[o * hw..(o + 1) * hw];
                        let mut acc = 0.0;
                        for (y, &ry) in rows.iter().enumerate() {
                            let gr = &g[y * w..(y + 1) * w];
                            let sr = &src[ry * w..(ry + 1) * w];
                            for (&gv, &cx) in gr.iter().zip(&cols) {
                                acc += gv * sr[cx];
                            }
                        }
                        grad[((o * self.in_ch + i) * self.kh + dy) * self.kw + dx] = acc;
                    }
                }
            }
        }
        grad
    }

    /// Exact operator norm on an `h x w` periodic grid.
    ///
    /// The bank block-diagonalizes under the 2-D DFT; at each frequency the block
    /// is an `out x in` matrix whose Gram matrix is at most 2 x 2.
    pub fn spectral_norm(&self, h: usize, w: usize) -> f64 {
        let (cy, cx) = (self.kh as isize / 2, self.kw as isize / 2);
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut block = vec![Complex64::new(0.0, 0.0); self.out_ch * self.in_ch];
        let mut best: f64 = 0.0;
        for u in 0..h {
            for v in 0..w {
                block.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let phase = two_pi
                            * ((u as f64) * (dy as isize - cy) as f64 / h as f64
                                + (v as f64) * (dx as isize - cx) as f64 / w as f64);
                        let e = Complex64::from_polar(1.0, phase);
                        for o in 0..self.out_ch {
                            for i in 0..self.in_ch {
                                block[o * self.in_ch + i] += e * self.k(o, i, dy, dx);
                            }
                        }
                    }
                }
                best = best.max(block_norm_sqr(&block, self.out_ch, self.in_ch));
            }
        }
        best.sqrt()
    }
}

/// Largest eigenvalue of the smaller Gram matrix of an `rows x cols` block.
fn block_norm_sqr(block: &[Complex64], rows: usize, cols: usize) -> f64 {
    let m = rows.min(cols);
    let entry = |a: usize, b: usize| -> Complex64 {
        if cols <= rows {
            (0..rows).map(|r| block[r * cols + a].conj() * block[r * cols + b]).sum()
        } else {
            (0..cols).map(|c| block[a * cols + c] * block[b * cols + c].conj()).sum()
        }
    };
    match m {
        1 => entry(0, 0).re,
        2 => {
            let a = entry(0, 0).re;
            let d = entry(1, 1).re;
            let b = entry(0, 1).norm_sqr();
            0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b).sqrt()
        }
        _ => unreachable!("bank construction bounds the Gram size"),
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn to_channels(x: &Tensor) -> Vec<f64> {
    let mut out = x.real_parts();
    out.extend(x.imag_parts());
    out
}

fn from_channels(c: &[f64], shape: &[usize]) -> Tensor {
    let n = c.len() / 2;
    let data = c[..n]
        .iter()
        .zip(&c[n..])
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("channel split preserves size")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub sigma1: f64,
    pub sigma2: f64,
    /// Factor applied to each bank.
    pub scale: f64,
    /// `sigma1 * sigma2 * scale^2`.
    pub certified_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    w1: ConvBank,
    w2: ConvBank,
    budget: f64,
    shape: [usize; 2],
}

impl ResidualLayer {
    pub fn new(w1: ConvBank, w2: ConvBank, budget: f64, shape: &[usize]) -> Result<Self> {
        let &[h, w] = shape else {
            return Err(Error::InvalidArgument(format!(
                "residual layer expects a 2-D image shape, got {shape:?}"
            )));
        };
        if w1.in_ch != 2 || w2.out_ch != 2 || w1.out_ch != w2.in_ch {
            return Err(Error::InvalidArgument(format!(
                "residual banks must map 2 -> F -> 2 channels, got {}->{} and {}->{}",
                w1.in_ch, w1.out_ch, w2.in_ch, w2.out_ch
            )));
        }
        if !(budget > 0.0 && budget < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz budget must lie in (0, 1), got {budget}"
            )));
        }
        Ok(Self {
            w1,
            w2,
            budget,
            shape: [h, w],
        })
    }

    pub fn w1(&self) -> &ConvBank {
        &self.w1
    }

    pub fn w2(&self) -> &ConvBank {
        &self.w2
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Product-of-norms bound on `Lip(g)`.
    pub fn lipschitz_bound(&self) -> f64 {
        let [h, w] = self.shape;
        self.w1.spectral_norm(h, w) * self.w2.spectral_norm(h, w)
    }

    /// True when the product bound fits the budget and is contractive.
    pub fn is_certified(&self) -> bool {
        let bound = self.lipschitz_bound();
        bound <= self.budget * (1.0 + BUDGET_SLACK) && check_contraction(bound).accepted
    }

    /// The displacement `g(x) = W2 sigma(W1 x)`.
    pub fn displacement(&self, x: &Tensor) -> Tensor {
        let [h, w] = self.shape;
        let hidden = self.w1.apply(&to_channels(x), h, w);
        let act: Vec<f64> = hidden.iter().map(|&t| softplus(t)).collect();
        from_channels(&self.w2.apply(&act, h, w), &self.shape)
    }

    pub(crate) fn forward(&self, x: &Tensor, meter: &mut OpMeter) -> Result<Tensor> {
        x.expect_shape(&self.shape, "residual layer input")?;
        meter.operator_applications += 1;
        Ok(x + &self.displacement(x))
    }

    /// Iterates `x <- v - g(x)` from `x = v`.
    pub(crate) fn inverse(&self, v: &Tensor, cfg: &FixedPointConfig, meter: &mut OpMeter) -> Result<Tensor> {
        v.expect_shape(&self.shape, "residual layer output")?;
        let bound = self.lipschitz_bound();
        if !check_contraction(bound).accepted {
            return Err(Error::NotContractive { bound });
        }
        let result = fixed_point_solve(|x| Ok(v - &self.displacement(x)), v, cfg)?;
        meter.operator_applications += result.iterations_used as u64;
        meter.fixed_point_inner_iterations += result.iterations_used as u64;
        Ok(result.solution)
    }

    pub(crate) fn vjp(&self, x: &Tensor, q: &Tensor, meter: &mut OpMeter) -> Result<LayerVjp> {
        x.expect_shape(&self.shape, "residual layer input")?;
        q.expect_shape(&self.shape, "residual layer cotangent")?;
        meter.operator_applications += 1;
        let [h, w] = self.shape;
        let xc = to_channels(x);
        let qc = to_channels(q);
        let hidden = self.w1.apply(&xc, h, w);
        let act: Vec<f64> = hidden.iter().map(|&t| softplus(t)).collect();
        let back_act = self.w2.apply_transpose(&qc, h, w);
        let back_hidden: Vec<f64> = back_act
            .iter()
            .zip(&hidden)
            .map(|(&p, &t)| p * sigmoid(t))
            .collect();
        let jt_q = self.w1.apply_transpose(&back_hidden, h, w);
        let input: Vec<f64> = qc.iter().zip(&jt_q).map(|(a, b)| a + b).collect();

        let mut param_grads = self.w1.kernel_gradient(&xc, &back_hidden, h, w);
        param_grads.extend(self.w2.kernel_gradient(&act, &qc, h, w));
        Ok(LayerVjp {
            input_grad: from_channels(&input, &self.shape),
            param_grads,
            measurement_grads: Vec::new(),
        })
    }

    pub(crate) fn parameter_names(&self) -> Vec<String> {
        let n1 = self.w1.weights.len();
        (0..n1)
            .map(|i| format!("w1[{i}]"))
            .chain((0..self.w2.weights.len()).map(|i| format!("w2[{i}]")))
            .collect()
    }

    pub(crate) fn parameters(&self) -> Vec<f64> {
        let mut p = self.w1.weights.clone();
        p.extend_from_slice(&self.w2.weights);
        p
    }

    pub(crate) fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        let n1 = self.w1.weights.len();
        if values.len() != n1 + self.w2.weights.len() {
            return Err(Error::InvalidArgument("residual parameter count mismatch".into()));
        }
        Ok(Self {
            w1: self.w1.with_weights(&values[..n1])?,
            w2: self.w2.with_weights(&values[n1..])?,
            ..self.clone()
        })
    }
}

/// Rescales both banks by `sqrt(min(1, L_max / (sigma1 sigma2)))` so the product bound
/// fits the budget. Layers already within budget come back unchanged.
pub fn constrain_lipschitz(layer: &ResidualLayer) -> (ResidualLayer, LipschitzReport) {
    let [h, w] = layer.shape;
    let sigma1 = layer.w1.spectral_norm(h, w);
    let sigma2 = layer.w2.spectral_norm(h, w);
    let product = sigma1 * sigma2;
    if product <= layer.budget * (1.0 + BUDGET_SLACK) {
        return (
            layer.clone(),
            LipschitzReport {
                sigma1,
                sigma2,
                scale: 1.0,
                certified_bound: product,
            },
        );
    }
    let scale = (layer.budget / product).sqrt();
    let constrained = ResidualLayer {
        w1: layer.w1.scaled(scale),
        w2: layer.w2.scaled(scale),
        ..layer.clone()
    };
    (
        constrained,
        LipschitzReport {
            sigma1,
            sigma2,
            scale,
            certified_bound: product * scale * scale,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::power_iteration;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = ConvBank::random(3, 2, 3, 3, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..2 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = bank.apply(&x, 4, 5);
        let aty = bank.apply_transpose(&y, 4, 5);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (o, i) in [(4, 2), (2, 4), (1, 2), (2, 1)] {
            let bank = ConvBank::random(o, i, 3, 3, 0.5, &mut rng).unwrap();
            let exact = bank.spectral_norm(6, 6);
            let est = power_iteration(&[i * 36], 2000, 3, |v| {
                let x: Vec<f64> = v.real_parts();
                let n = bank.apply_transpose(&bank.apply(&x, 6, 6), 6, 6);
                Tensor::from_real(&[i * 36], &n).unwrap()
            })
            .unwrap()
            .value
            .sqrt();
            assert!((exact - est).abs() < 1e-6 * exact, "{o}x{i}: {exact} vs {est}");
        }
    }

    #[test]
    fn softplus_is_shifted_and_stable() {
        assert_eq!(softplus(0.0), 0.0);
        assert!((softplus(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!(softplus(-800.0).is_finite());
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_channel_layout() {
        let w1 = ConvBank::zeros(4, 2, 3, 3).unwrap();
        let w2 = ConvBank::zeros(2, 3, 3, 3).unwrap();
        assert!(ResidualLayer::new(w1.clone(), w2, 0.5, &[4, 4]).is_err());
        let w2 = ConvBank::zeros(2, 4, 3, 3).unwrap();
        assert!(ResidualLayer::new(w1.clone(), w2.clone(), 1.0, &[4, 4]).is_err());
        assert!(ResidualLayer::new(w1, w2, 0.5, &[16]).is_err());
    }
}

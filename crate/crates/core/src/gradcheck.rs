//! Finite-difference and cross-engine gradient checks on an application.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engines::{relative_deviation, Engine, VjpOverride};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointConfig;
use crate::layers::{Layer, OpMeter};
use crate::network::{Network, StoragePolicy};
use crate::numerics::Tensor;
use crate::training::{Application, EvalOptions, TrainingExample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub finite_difference: f64,
    pub memory_efficient: f64,
    pub hybrid: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            finite_difference: 1e-5,
            memory_efficient: 1e-6,
            hybrid: 1e-6,
        }
    }
}

#[derive(Clone, Copy)]
pub struct GradcheckOptions<'a> {
    pub inverse: FixedPointConfig,
    pub checkpoint_every: usize,
    pub fd_step: f64,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub vjp_override: Option<&'a VjpOverride>,
}

impl GradcheckOptions<'_> {
    pub fn new(inverse: FixedPointConfig, checkpoint_every: usize) -> Self {
        Self {
            inverse,
            checkpoint_every,
            fd_step: 1e-6,
            thresholds: Thresholds::default(),
            seed: 0,
            vjp_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterCheck {
    pub name: String,
    pub standard: f64,
    pub finite_difference: f64,
    pub fd_error: f64,
    pub memory_efficient_error: f64,
    pub hybrid_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub index: usize,
    pub kind: &'static str,
    /// Directional-derivative mismatch of the input VJP.
    pub input_error: f64,
    /// Normwise mismatch of the parameter VJP.
    pub param_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub parameters: Vec<ParameterCheck>,
    pub layers: Vec<LayerCheck>,
    pub max_fd_error: f64,
    pub max_memory_efficient_error: f64,
    pub max_hybrid_error: f64,
    pub thresholds: Thresholds,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing_layers(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers.iter().filter(|l| !l.passed)
    }
}

/// `|a - b|` relative to `|b|`, with `b`'s scale floored at `floor`.
fn floored_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = b.abs().max(floor);
    if scale == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Relative floor for per-parameter errors: entries smaller than this fraction
/// of the largest gradient are compared at that scale.
const FLOOR_FRACTION: f64 = 1e-4;

pub fn gradcheck(app: &Application, opts: &GradcheckOptions<'_>) -> Result<GradcheckReport> {
    let ex = app
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("gradcheck needs a training example".into()))?;
    let net = &app.network;
    let mut eval = EvalOptions::new(opts.inverse);
    eval.vjp_override = opts.vjp_override;

    let standard = app.evaluate(net, ex, Engine::Standard, &eval)?.grads;
    let memory = app.evaluate(net, ex, Engine::MemoryEfficient, &eval)?.grads;
    let hybrid = app
        .evaluate(
            net,
            ex,
            Engine::Hybrid {
                every: opts.checkpoint_every.max(1),
            },
            &eval,
        )?
        .grads;

    let values = app.params.gather(net);
    let h = opts.fd_step;
    let mut fd = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let mut plus = values.clone();
        let mut minus = values.clone();
        plus[i] += h;
        minus[i] -= h;
        let lp = app.loss(&app.params.scatter(net, &plus)?, ex)?;
        let lm = app.loss(&app.params.scatter(net, &minus)?, ex)?;
        fd.push((lp - lm) / (2.0 * h));
    }

    let floor = FLOOR_FRACTION * standard.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let parameters: Vec<ParameterCheck> = app
        .params
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| ParameterCheck {
            name: name.clone(),
            standard: standard[i],
            finite_difference: fd[i],
            fd_error: floored_error(standard[i], fd[i], floor),
            memory_efficient_error: floored_error(memory[i], standard[i], floor),
            hybrid_error: floored_error(hybrid[i], standard[i], floor),
        })
        .collect();

    let layers = layer_checks(app, net, ex, opts)?;
    let max = |f: fn(&ParameterCheck) -> f64| parameters.iter().map(f).fold(0.0, f64::max);
    let max_fd_error = max(|p| p.fd_error);
    let max_memory_efficient_error = max(|p| p.memory_efficient_error);
    let max_hybrid_error = max(|p| p.hybrid_error);
    let t = opts.thresholds;
    let passed = max_fd_error <= t.finite_difference
        && max_memory_efficient_error <= t.memory_efficient
        && max_hybrid_error <= t.hybrid
        && layers.iter().all(|l| l.passed);
    Ok(GradcheckReport {
        parameters,
        layers,
        max_fd_error,
        max_memory_efficient_error,
        max_hybrid_error,
        thresholds: t,
        passed,
    })
}

/// Checks every layer's VJP at its true input against central differences of its forward map.
fn layer_checks(
    app: &Application,
    net: &Network,
    ex: &TrainingExample,
    opts: &GradcheckOptions<'_>,
) -> Result<Vec<LayerCheck>> {
    let inst = app.instance(net, ex)?.with_policy(StoragePolicy::StoreAll)?;
    let record = inst.forward(&ex.initialization)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    inst.layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let x = record.state(k)?;
            let q = Tensor::random_uniform(x.shape(), &mut rng);
            let d = Tensor::random_uniform(x.shape(), &mut rng);
            let (input_error, param_error) =
                check_layer(k, layer, x, &q, &d, opts).map_err(|e| e.at_layer(k))?;
            let tol = opts.thresholds.finite_difference;
            Ok(LayerCheck {
                index: k,
                kind: layer.kind_name(),
                input_error,
                param_error,
                passed: input_error <= tol && param_error <= tol,
            })
        })
        .collect()
}

/// `(input error, parameter error)` of one layer's VJP against central differences.
pub fn check_layer(
    k: usize,
    layer: &Layer,
    x: &Tensor,
    q: &Tensor,
    d: &Tensor,
    opts: &GradcheckOptions<'_>,
) -> Result<(f64, f64)> {
    let h = opts.fd_step;
    let mut meter = OpMeter::default();
    let vjp = match opts.vjp_override {
        Some(f) => f(k, layer, x, q, &mut meter)?,
        None => layer.vjp(x, q, &mut meter)?,
    };
    let fwd = |l: &Layer, v: &Tensor| l.forward(v, &mut OpMeter::default());

    let mut xp = x.clone();
    xp.axpy(h, d);
    let mut xm = x.clone();
    xm.axpy(-h, d);
    let fd_dir = (&fwd(layer, &xp)? - &fwd(layer, &xm)?).real_dot(q) / (2.0 * h);
    let an_dir = vjp.input_grad.real_dot(d);
    let input_error = (fd_dir - an_dir).abs() / fd_dir.abs().max(an_dir.abs()).max(f64::MIN_POSITIVE);

    let theta = layer.parameters();
    let mut fd_params = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[j] += h;
        tm[j] -= h;
        let diff = &fwd(&layer.with_parameters(&tp)?, x)? - &fwd(&layer.with_parameters(&tm)?, x)?;
        fd_params.push(diff.real_dot(q) / (2.0 * h));
    }
    let param_error = relative_deviation(&vjp.param_grads, &fd_params);
    Ok((input_error, param_error))
}

//! The two desk-scale applications: learned multiplexed acquisition design
//! and a learned invertible residual prior for multi-coil Fourier imaging.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engines::{backprop, Engine, ReverseOptions, StateResidual, VjpOverride};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointConfig;
use crate::layers::{
    constrain_lipschitz, ConvBank, FidelityTerm, ForwardModel, GradientLayer, Layer, ResidualLayer,
    SmoothProxLayer,
};
use crate::network::{InstrumentationCounters, Network, ParameterMap, StoragePolicy};
use crate::numerics::{LinearOperator, Tensor};

use super::config::{ApplicationKind, ExperimentConfig, LearnTarget, MriConfig, SrConfig};
use super::data::{complex_noise, loss_mse, smooth_phantom};

/// Largest `alpha * sigma_max` kept after an optimizer step.
pub const STEP_CLAMP: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub ground_truth: Tensor,
    /// One noise draw per fidelity term; measurements are re-formed from it when the design changes.
    pub noise: Vec<Tensor>,
    pub measurements: Vec<Tensor>,
    pub initialization: Tensor,
}

#[derive(Debug, Clone)]
pub struct ExampleEval {
    pub loss: f64,
    /// Aligned with the application's parameter map.
    pub grads: Vec<f64>,
    pub counters: InstrumentationCounters,
    pub residuals: Option<Vec<StateResidual>>,
}

#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub inverse: FixedPointConfig,
    pub shadow: bool,
    pub vjp_override: Option<&'a VjpOverride>,
}

impl EvalOptions<'_> {
    pub fn new(inverse: FixedPointConfig) -> Self {
        Self {
            inverse,
            shadow: false,
            vjp_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Application {
    pub kind: ApplicationKind,
    /// Current network; measurements are those of the first training example.
    pub network: Network,
    pub params: ParameterMap,
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    step_fraction: f64,
    learn: Vec<LearnTarget>,
    /// `(term, source, global index)` of each learnable design coefficient.
    design_slots: Vec<(usize, usize, usize)>,
}

impl Application {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.application {
            ApplicationKind::SrDesign => build_sr_design_app(cfg),
            ApplicationKind::MriPrior => build_mri_prior_app(cfg),
        }
    }

    pub fn learn_targets(&self) -> &[LearnTarget] {
        &self.learn
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.params.gather(&self.network)
    }

    /// Shared forward model of the gradient layers.
    pub fn forward_model(&self, net: &Network) -> Result<Arc<ForwardModel>> {
        net.layers()
            .iter()
            .find_map(Layer::as_gradient)
            .map(|g| g.model().clone())
            .ok_or_else(|| Error::InvalidArgument("network has no gradient layer".into()))
    }

    /// Measurements of `ex` under the network's current acquisition model.
    pub fn measurements(&self, net: &Network, ex: &TrainingExample) -> Result<Arc<Vec<Tensor>>> {
        match self.kind {
            ApplicationKind::MriPrior => Ok(Arc::new(ex.measurements.clone())),
            ApplicationKind::SrDesign => {
                let model = self.forward_model(net)?;
                let ys = model
                    .terms()
                    .iter()
                    .zip(&ex.noise)
                    .map(|(t, n)| Ok(&t.operator.apply_forward(&ex.ground_truth)? + n))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Arc::new(ys))
            }
        }
    }

    pub fn instance(&self, net: &Network, ex: &TrainingExample) -> Result<Network> {
        net.with_measurements(self.measurements(net, ex)?)
    }

    /// Reconstruction of `ex` by `net`.
    pub fn reconstruct(&self, net: &Network, ex: &TrainingExample) -> Result<Tensor> {
        let inst = self.instance(net, ex)?.with_policy(StoragePolicy::StoreNone)?;
        Ok(inst.forward(&ex.initialization)?.output)
    }

    pub fn loss(&self, net: &Network, ex: &TrainingExample) -> Result<f64> {
        Ok(loss_mse(&self.reconstruct(net, ex)?, &ex.ground_truth)?.0)
    }

    pub fn mean_loss(&self, net: &Network, examples: &[TrainingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            total += self.loss(net, ex)?;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Loss and gradient for one example with the chosen engine.
    pub fn evaluate(
        &self,
        net: &Network,
        ex: &TrainingExample,
        engine: Engine,
        opts: &EvalOptions<'_>,
    ) -> Result<ExampleEval> {
        let inst = self.instance(net, ex)?;
        let run = inst.with_policy(engine.storage_policy())?;
        let record = run.forward(&ex.initialization)?;
        let (loss, q) = loss_mse(&record.output, &ex.ground_truth)?;
        let shadow = if opts.shadow {
            Some(inst.with_policy(StoragePolicy::StoreAll)?.forward(&ex.initialization)?)
        } else {
            None
        };
        let mut reverse = ReverseOptions::new(opts.inverse);
        if let Some(s) = shadow.as_ref() {
            reverse = reverse.with_shadow(s);
        }
        if let Some(f) = opts.vjp_override {
            reverse = reverse.with_vjp_override(f);
        }
        let report = backprop(engine, &run, &record, &q, &reverse)?;
        let mut grads = self.params.reduce(&report.param_grads);
        if !self.design_slots.is_empty() {
            let model = self.forward_model(&run)?;
            for &(term, s, global) in &self.design_slots {
                let Some(view) = model.terms()[term].operator.design_view() else {
                    continue;
                };
                let partial = &view.partials(&ex.ground_truth)[s];
                for per_layer in report.measurement_grads.iter().rev() {
                    if let Some(g) = per_layer.get(term) {
                        grads[global] += partial.real_dot(g);
                    }
                }
            }
        }
        Ok(ExampleEval {
            loss,
            grads,
            counters: report.diagnostics.counters,
            residuals: report.diagnostics.residuals,
        })
    }

    /// Writes optimizer output into `net`, projecting it onto the feasible set first:
    /// design weights nonnegative and prox strengths inside their contraction region.
    pub fn apply_update(&self, net: &Network, values: &[f64]) -> Result<Network> {
        let mut values = values.to_vec();
        for &(_, _, g) in &self.design_slots {
            values[g] = values[g].max(0.0);
        }
        for (k, layer) in net.layers().iter().enumerate() {
            if let (Layer::SmoothProx(p), Some(Some(g))) = (layer, self.params.slots(k).first()) {
                let limit = STEP_CLAMP / p.filter_norm();
                values[*g] = values[*g].clamp(-limit, limit);
            }
        }
        self.maintain(&self.params.scatter(net, &values)?)
    }

    /// Restores the invariants the optimizer may break: nonnegative design
    /// weights, step sizes inside the contraction region, and residual layers
    /// within their Lipschitz budget.
    pub fn maintain(&self, net: &Network) -> Result<Network> {
        let mut values = self.params.gather(net);
        for &(_, _, g) in &self.design_slots {
            values[g] = values[g].max(0.0);
        }
        let net = self.params.scatter(net, &values)?;
        let learn_step = self.learn.contains(&LearnTarget::Step);
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                match layer {
                    Layer::Gradient(g) => {
                        let sigma = g.model().sigma_max();
                        if !(sigma > 0.0) {
                            return Ok(layer.clone());
                        }
                        let step = if learn_step {
                            g.step().clamp(0.0, STEP_CLAMP / sigma)
                        } else {
                            self.step_fraction.min(STEP_CLAMP) / sigma
                        };
                        g.with_step(step).map(Layer::Gradient)
                    }
                    Layer::Residual(r) => Ok(Layer::Residual(constrain_lipschitz(r).0)),
                    other => Ok(other.clone()),
                }
                .map_err(|e| e.at_layer(k))
            })
            .collect::<Result<Vec<_>>>()?;
        net.with_layers(layers)
    }

    /// `depth` layers cycling through the current network's layers.
    pub fn network_of_depth(&self, depth: usize) -> Result<Network> {
        let layers = self.network.layers();
        Network::new(
            (0..depth).map(|k| layers[k % layers.len()].clone()).collect(),
            self.network.policy(),
        )
    }

    pub fn with_network(&self, network: Network) -> Self {
        Self {
            network,
            ..self.clone()
        }
    }

    /// Global indices of the design coefficients, `(term, source, index)`.
    pub fn design_slots(&self) -> &[(usize, usize, usize)] {
        &self.design_slots
    }
}

fn initial_step(step_fraction: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        step_fraction / sigma
    } else {
        step_fraction
    }
}

fn example_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (split << 48)
        ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn laplacian(shape: &[usize]) -> Result<LinearOperator> {
    let kernel = Tensor::from_real(&[3, 3], &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0])?;
    LinearOperator::circular_convolution(shape, kernel)
}

/// Fourier-patch selectors: source `s` reads the `patch x patch` tile `s` of the spectrum.
pub fn patch_masks(n: usize, patch: usize) -> Result<Vec<LinearOperator>> {
    if patch == 0 || n % patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch size {patch} must divide image size {n}"
        )));
    }
    let tiles = n / patch;
    (0..tiles * tiles)
        .map(|s| {
            let (ti, tj) = (s / tiles, s % tiles);
            let idx = (0..patch * patch)
                .map(|j| (ti * patch + j / patch) * n + tj * patch + j % patch)
                .collect();
            LinearOperator::mask(&[n, n], idx)
        })
        .collect()
}

/// Random nonnegative `rows x cols` design with each row summing to `row_sum`.
pub fn random_design(rows: usize, cols: usize, row_sum: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v * row_sum / total).collect()
        })
        .collect()
}

/// Acquisition model `A_l = (sum_s c_ls M_s) F`.
pub fn sr_forward_model(n: usize, patch: usize, design: &[Vec<f64>]) -> Result<ForwardModel> {
    let masks = patch_masks(n, patch)?;
    let dft = LinearOperator::dft(&[n, n])?;
    let terms = design
        .iter()
        .map(|row| {
            Ok(FidelityTerm {
                weight: 1.0,
                operator: LinearOperator::compose(vec![
                    LinearOperator::weighted_sum(row.clone(), masks.clone())?,
                    dft.clone(),
                ])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ForwardModel::new(terms)
}

pub fn build_sr_design_app(cfg: &ExperimentConfig) -> Result<Application> {
    let SrConfig {
        patch,
        channels,
        prior_contraction,
        prior_inner_iters,
        design_row_sum,
    } = cfg.sr.clone();
    let n = cfg.image_size;
    if n < 8 {
        return Err(Error::InvalidConfig(format!("image_size must be >= 8, got {n}")));
    }
    let sources = patch_masks(n, patch)?.len();
    if channels == 0 || channels >= sources {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= channels < sources, got {channels} channels for {sources} sources"
        )));
    }
    if !(0.0..1.0).contains(&prior_contraction) {
        return Err(Error::InvalidConfig(format!(
            "prior_contraction must lie in [0, 1), got {prior_contraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let design = random_design(channels, sources, design_row_sum, &mut rng);
    let model = Arc::new(sr_forward_model(n, patch, &design)?);
    let shape = [n, n];

    let make = |split: u64, i: usize| -> Result<TrainingExample> {
        let mut r = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, split, i));
        let x = smooth_phantom(&shape, n as f64 / 8.0, &mut r)?;
        let noise = (0..channels)
            .map(|l| complex_noise(&[patch * patch], cfg.noise_std, example_seed(r.random(), 3, l)))
            .collect::<Result<Vec<_>>>()?;
        let measurements = model
            .terms()
            .iter()
            .zip(&noise)
            .map(|(t, e)| Ok(&t.operator.apply_forward(&x)? + e))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingExample {
            ground_truth: x,
            noise,
            measurements,
            initialization: Tensor::zeros(&shape),
        })
    };
    let train = (0..cfg.train_examples).map(|i| make(1, i)).collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_examples).map(|i| make(2, i)).collect::<Result<Vec<_>>>()?;

    let filter = laplacian(&shape)?;
    let inner = FixedPointConfig::new(prior_inner_iters);
    let filter_norm = SmoothProxLayer::new(0.0, filter.clone(), inner)?.filter_norm();
    let prox = SmoothProxLayer::new(prior_contraction / filter_norm, filter, inner)?;
    let step = initial_step(cfg.step_fraction, model.sigma_max());
    let grad = GradientLayer::new(step, model, Arc::new(train[0].measurements.clone()))?;
    let layers: Vec<Layer> = (0..2 * cfg.unrolls)
        .map(|k| if k % 2 == 0 { grad.clone().into() } else { prox.clone().into() })
        .collect();
    let network = Network::new(layers, cfg.engine().storage_policy())?;

    let learn = cfg.learn_targets();
    let params = ParameterMap::build(&network, |k, layer, local| match layer {
        Layer::Gradient(_) if local == "step" => {
            learn.contains(&LearnTarget::Step).then(|| format!("step[{}]", k / 2))
        }
        Layer::Gradient(_) if local.starts_with("design") => {
            learn.contains(&LearnTarget::Design).then(|| local.to_string())
        }
        Layer::SmoothProx(_) => learn.contains(&LearnTarget::Prior).then(|| "prior.strength".into()),
        _ => None,
    });
    let design_slots = design_slot_table(&params, channels, sources);
    Ok(Application {
        kind: ApplicationKind::SrDesign,
        network,
        params,
        train,
        test,
        step_fraction: cfg.step_fraction,
        learn,
        design_slots,
    })
}

fn design_slot_table(params: &ParameterMap, terms: usize, sources: usize) -> Vec<(usize, usize, usize)> {
    let mut slots = Vec::new();
    for l in 0..terms {
        for s in 0..sources {
            let name = format!("design[{l}][{s}]");
            if let Some(g) = params.names().iter().position(|n| *n == name) {
                slots.push((l, s, g));
            }
        }
    }
    slots
}

/// Smooth coil sensitivities on a circle around the image, scaled so that
/// `max sum_c |S_c|^2 = 1`.
pub fn coil_sensitivities(coils: usize, n: usize) -> Result<Vec<Tensor>> {
    if coils < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 coils, got {coils}")));
    }
    let coord = |i: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut maps: Vec<Tensor> = (0..coils)
        .map(|c| {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / coils as f64;
            let (cy, cx) = (0.9 * theta.sin(), 0.9 * theta.cos());
            let data = (0..n * n)
                .map(|idx| {
                    let (y, x) = (coord(idx / n), coord(idx % n));
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    let phase = 0.5 * theta + 0.3 * (x * cx + y * cy);
                    Complex64::from_polar((-d2 / 1.6).exp(), phase)
                })
                .collect();
            Tensor::new(vec![n, n], data)
        })
        .collect::<Result<_>>()?;
    let peak = (0..n * n)
        .map(|i| maps.iter().map(|m| m.data()[i].norm_sqr()).sum::<f64>())
        .fold(0.0, f64::max);
    for m in &mut maps {
        *m = m.scale(1.0 / peak.sqrt());
    }
    Ok(maps)
}

/// Phase-encode rows kept: `center` rows around DC plus a random `fraction` of the rest.
pub fn sampled_rows(n: usize, center: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let center = center.min(n);
    let (lo, hi) = ((center + 1) / 2, center / 2);
    (0..n)
        .filter(|&r| {
            let draw = rng.random_bool(fraction.clamp(0.0, 1.0));
            r < lo || r >= n - hi || draw
        })
        .collect()
}

/// `A = mask o F_2d o coil-stack`.
pub fn mri_operator(sensitivities: Vec<Tensor>, rows: &[usize]) -> Result<LinearOperator> {
    let coils = sensitivities.len();
    let n = sensitivities
        .first()
        .map(|s| s.shape()[0])
        .ok_or_else(|| Error::InvalidConfig("no coil sensitivities".into()))?;
    let stack = LinearOperator::coil_stack(sensitivities)?;
    let dft = LinearOperator::dft_axes(&[coils, n, n], 2)?;
    let idx: Vec<usize> = (0..coils)
        .flat_map(|c| rows.iter().flat_map(move |&r| (0..n).map(move |k| (c * n + r) * n + k)))
        .collect();
    if idx.is_empty() {
        return Err(Error::InvalidConfig("sampling mask is empty".into()));
    }
    let mask = LinearOperator::mask(&[coils, n, n], idx)?;
    LinearOperator::compose(vec![mask, dft, stack])
}

fn random_residual(cfg: &MriConfig, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<ResidualLayer> {
    let (f, k) = (cfg.hidden_channels, cfg.kernel_size);
    let w1 = ConvBank::random(f, 2, k, k, cfg.init_std, rng)?;
    let w2 = ConvBank::random(2, f, k, k, cfg.init_std, rng)?;
    let layer = ResidualLayer::new(w1, w2, cfg.lipschitz_budget, shape)?;
    Ok(constrain_lipschitz(&layer).0)
}

pub fn build_mri_prior_app(cfg: &ExperimentConfig) -> Result<Application> {
    let n = cfg.image_size;
    let m = &cfg.mri;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sens = coil_sensitivities(m.coils, n)?;
    let rows = sampled_rows(n, m.center_lines, m.sampled_fraction, &mut rng);
    let op = mri_operator(sens, &rows)?;
    let shape = [n, n];

    let make = |split: u64, i: usize| -> Result<TrainingExample> {
        let mut r = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, split, i));
        let x = smooth_phantom(&shape, n as f64 / 6.0, &mut r)?;
        let noise = complex_noise(op.out_shape(), cfg.noise_std, r.random())?;
        let y = &op.apply_forward(&x)? + &noise;
        let x0 = op.apply_adjoint(&y)?;
        Ok(TrainingExample {
            ground_truth: x,
            noise: vec![noise],
            measurements: vec![y],
            initialization: x0,
        })
    };
    let train = (0..cfg.train_examples).map(|i| make(1, i)).collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_examples).map(|i| make(2, i)).collect::<Result<Vec<_>>>()?;

    let model = Arc::new(ForwardModel::single(op));
    let step = initial_step(cfg.step_fraction, model.sigma_max());
    let grad = GradientLayer::new(step, model, Arc::new(train[0].measurements.clone()))?;
    let shared = random_residual(m, &shape, &mut rng)?;
    let mut layers: Vec<Layer> = Vec::with_capacity(2 * cfg.unrolls);
    for _ in 0..cfg.unrolls {
        layers.push(grad.clone().into());
        let prior = if m.share_prior {
            shared.clone()
        } else {
            random_residual(m, &shape, &mut rng)?
        };
        layers.push(prior.into());
    }
    let network = Network::new(layers, cfg.engine().storage_policy())?;

    let learn = cfg.learn_targets();
    let share = m.share_prior;
    let params = ParameterMap::build(&network, |k, layer, local| match layer {
        Layer::Gradient(_) if local == "step" => {
            learn.contains(&LearnTarget::Step).then(|| format!("step[{}]", k / 2))
        }
        Layer::Residual(_) if learn.contains(&LearnTarget::Prior) => Some(if share {
            format!("prior.{local}")
        } else {
            format!("prior[{}].{local}", k / 2)
        }),
        _ => None,
    });
    Ok(Application {
        kind: ApplicationKind::MriPrior,
        network,
        params,
        train,
        test,
        step_fraction: cfg.step_fraction,
        learn,
        design_slots: Vec::new(),
    })
}

//! Reverse-mode gradient engines.
//!
//! All three share one reverse sweep. They differ only in where the input of
//! each layer comes from: the forward record (standard), the layer inverse
//! applied to the following state (memory-efficient), or the record when a
//! checkpoint exists and the inverse otherwise (hybrid).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::FixedPointConfig;
use crate::layers::{Layer, LayerVjp, OpMeter};
use crate::network::{ForwardRecord, InstrumentationCounters, Network, StoragePolicy};
use crate::numerics::{relative_distance, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Standard,
    MemoryEfficient,
    Hybrid,
}

/// Engine plus the checkpoint spacing the hybrid engine needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Standard,
    MemoryEfficient,
    Hybrid { every: usize },
}

impl Engine {
    pub fn kind(&self) -> EngineKind {
        match self {
            Engine::Standard => EngineKind::Standard,
            Engine::MemoryEfficient => EngineKind::MemoryEfficient,
            Engine::Hybrid { .. } => EngineKind::Hybrid,
        }
    }

    /// Forward storage the engine consumes.
    pub fn storage_policy(&self) -> StoragePolicy {
        match *self {
            Engine::Standard => StoragePolicy::StoreAll,
            Engine::MemoryEfficient => StoragePolicy::StoreNone,
            Engine::Hybrid { every } => StoragePolicy::CheckpointEvery(every),
        }
    }
}

/// Replacement VJP, for negative controls.
pub type VjpOverride = dyn Fn(usize, &Layer, &Tensor, &Tensor, &mut OpMeter) -> Result<LayerVjp> + Sync;

#[derive(Clone, Copy)]
pub struct ReverseOptions<'a> {
    /// Fixed-point budget for gradient and residual inverses.
    pub inverse: FixedPointConfig,
    /// Store-all record of the same forward pass; enables reverse-state residuals.
    pub shadow: Option<&'a ForwardRecord>,
    pub vjp_override: Option<&'a VjpOverride>,
}

impl<'a> ReverseOptions<'a> {
    pub fn new(inverse: FixedPointConfig) -> Self {
        Self {
            inverse,
            shadow: None,
            vjp_override: None,
        }
    }

    pub fn with_shadow(mut self, shadow: &'a ForwardRecord) -> Self {
        self.shadow = Some(shadow);
        self
    }

    pub fn with_vjp_override(mut self, f: &'a VjpOverride) -> Self {
        self.vjp_override = Some(f);
        self
    }
}

impl std::fmt::Debug for ReverseOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReverseOptions")
            .field("inverse", &self.inverse)
            .field("shadow", &self.shadow.is_some())
            .field("vjp_override", &self.vjp_override.is_some())
            .finish()
    }
}

/// Distance between the reverse state and the true forward state at index `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateResidual {
    pub index: usize,
    /// Relative error of the inverse-computed state, before any checkpoint replacement.
    pub recalculated: Option<f64>,
    /// Relative error of the state actually used for the VJP.
    pub used: f64,
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Forward plus reverse work; peaks over both passes.
    pub counters: InstrumentationCounters,
    pub reverse_counters: InstrumentationCounters,
    /// Reverse work per layer.
    pub layer_meters: Vec<OpMeter>,
    /// Indexed by state `k = 0..N-1`, present with shadow diagnostics.
    pub residuals: Option<Vec<StateResidual>>,
}

impl Diagnostics {
    pub fn max_residual(&self) -> Option<f64> {
        self.residuals
            .as_ref()
            .map(|r| r.iter().map(|s| s.used).fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Local parameter gradients of each layer, aligned with `Layer::parameter_names`.
    pub param_grads: Vec<Vec<f64>>,
    pub input_grad: Tensor,
    /// Measurement cotangents of each layer, one per fidelity term; empty for non-gradient layers.
    pub measurement_grads: Vec<Vec<Tensor>>,
    pub diagnostics: Diagnostics,
}

pub fn backprop_standard(net: &Network, record: &ForwardRecord, q_n: &Tensor) -> Result<GradientReport> {
    reverse(net, record, q_n, Source::Stored, &ReverseOptions::new(FixedPointConfig::new(1)))
}

pub fn backprop_memory_efficient(
    net: &Network,
    record: &ForwardRecord,
    q_n: &Tensor,
    opts: &ReverseOptions<'_>,
) -> Result<GradientReport> {
    let report = net.certify_invertible();
    if let Some(err) = report.to_error() {
        return Err(err);
    }
    reverse(net, record, q_n, Source::Recalculated, opts)
}

pub fn backprop_hybrid(
    net: &Network,
    record: &ForwardRecord,
    q_n: &Tensor,
    opts: &ReverseOptions<'_>,
) -> Result<GradientReport> {
    if !matches!(record.policy, StoragePolicy::CheckpointEvery(_)) {
        return Err(Error::InvalidArgument(format!(
            "hybrid engine needs a checkpointed forward record, got {:?}",
            record.policy
        )));
    }
    let n = net.depth();
    let report = net.certify_invertible();
    if let Some(e) = report
        .layers
        .iter()
        .find(|e| !e.accepted && !record.policy.stores(e.index, n))
    {
        return Err(Error::NotContractive {
            bound: e.bound.unwrap_or(f64::INFINITY),
        }
        .at_layer(e.index));
    }
    reverse(net, record, q_n, Source::Checkpointed, opts)
}

/// Dispatches on `engine`, checking the record was made with the matching policy.
pub fn backprop(
    engine: Engine,
    net: &Network,
    record: &ForwardRecord,
    q_n: &Tensor,
    opts: &ReverseOptions<'_>,
) -> Result<GradientReport> {
    if record.policy != engine.storage_policy() {
        return Err(Error::InvalidArgument(format!(
            "{:?} engine needs a {:?} forward record, got {:?}",
            engine.kind(),
            engine.storage_policy(),
            record.policy
        )));
    }
    match engine {
        Engine::Standard => reverse(net, record, q_n, Source::Stored, opts),
        Engine::MemoryEfficient => backprop_memory_efficient(net, record, q_n, opts),
        Engine::Hybrid { .. } => backprop_hybrid(net, record, q_n, opts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Stored,
    Recalculated,
    Checkpointed,
}

fn reverse(
    net: &Network,
    record: &ForwardRecord,
    q_n: &Tensor,
    source: Source,
    opts: &ReverseOptions<'_>,
) -> Result<GradientReport> {
    let n = net.depth();
    q_n.expect_shape(net.shape(), "loss gradient")?;
    if record.layer_meters.len() != n {
        return Err(Error::InvalidArgument(format!(
            "forward record has {} layers, network has {n}",
            record.layer_meters.len()
        )));
    }
    if source != Source::Stored {
        opts.inverse.validate()?;
    }
    let shadow = opts.shadow;
    if let Some(s) = shadow {
        if s.stored.len() != n + 1 {
            return Err(Error::InvalidArgument("shadow record must store every state".into()));
        }
    }

    // Only the input is retained in reverse recalculation; intermediate
    // entries a record may happen to hold are ignored.
    let available = |k: usize| -> Option<&Tensor> {
        let keep = match source {
            Source::Stored | Source::Checkpointed => true,
            Source::Recalculated => k == 0 || k == n,
        };
        if keep {
            record.stored.get(&k)
        } else {
            None
        }
    };

    let mut counters = InstrumentationCounters::default();
    counters.note_stored(record.stored.len());
    let mut layer_meters = vec![OpMeter::default(); n];
    let mut param_grads = vec![Vec::new(); n];
    let mut measurement_grads = vec![Vec::new(); n];
    let mut residuals = shadow.map(|_| Vec::with_capacity(n));

    let mut x = record.output.clone();
    let mut q = q_n.clone();
    for k in (0..n).rev() {
        let layer = &net.layers()[k];
        let mut meter = OpMeter::default();
        let stored = available(k);
        let recalculated = match (stored, source) {
            (_, Source::Stored) => None,
            (None, _) => Some(layer.inverse(&x, &opts.inverse, &mut meter).map_err(|e| e.at_layer(k))?),
            (Some(_), _) if shadow.is_some() => {
                // Diagnostic only: uncounted.
                Some(layer
                    .inverse(&x, &opts.inverse, &mut OpMeter::default())
                    .map_err(|e| e.at_layer(k))?)
            }
            (Some(_), _) => None,
        };
        let x_in = match stored {
            Some(s) => s.clone(),
            None if source == Source::Stored => return Err(Error::MissingState(k)),
            None => recalculated.clone().expect("inverse computed above"),
        };
        counters.note_workspace(if stored.is_some() { 2 } else { 4 });

        if let (Some(res), Some(s)) = (residuals.as_mut(), shadow) {
            let truth = &s.stored[&k];
            res.push(StateResidual {
                index: k,
                recalculated: recalculated.as_ref().map(|r| relative_distance(r, truth)),
                used: relative_distance(&x_in, truth),
                checkpoint: stored.is_some(),
            });
        }

        let vjp = match opts.vjp_override {
            Some(f) => f(k, layer, &x_in, &q, &mut meter),
            None => layer.vjp(&x_in, &q, &mut meter),
        }
        .map_err(|e| e.at_layer(k))?;
        if !vjp.input_grad.is_finite() || vjp.param_grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { iteration: 0 }.at_layer(k));
        }
        measurement_grads[k] = vjp.measurement_grads;
        param_grads[k] = vjp.param_grads;
        q = vjp.input_grad;
        x = x_in;
        counters.add_work(meter);
        layer_meters[k] = meter;
    }

    if let Some(r) = residuals.as_mut() {
        r.reverse();
    }
    let mut total = record.counters;
    total.merge(&counters);
    Ok(GradientReport {
        param_grads,
        input_grad: q,
        measurement_grads,
        diagnostics: Diagnostics {
            counters: total,
            reverse_counters: counters,
            layer_meters,
            residuals,
        },
    })
}

/// Normwise relative deviation of `a` from reference `b`: `max|a-b| / max|b|`,
/// or the absolute deviation when `b` is zero.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Largest per-layer [`relative_deviation`] between two reports.
pub fn max_gradient_deviation(a: &GradientReport, b: &GradientReport) -> f64 {
    a.param_grads
        .iter()
        .zip(&b.param_grads)
        .map(|(x, y)| relative_deviation(x, y))
        .fold(0.0, f64::max)
}

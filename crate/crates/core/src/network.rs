//! Sequential networks of layers, storage policies and instrumentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ForwardModel, GradientLayer, Layer, LayerCertificate, OpMeter};
use crate::numerics::Tensor;

/// Which layer-boundary states the forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "k")]
pub enum StoragePolicy {
    StoreAll,
    StoreNone,
    CheckpointEvery(usize),
}

impl StoragePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            StoragePolicy::CheckpointEvery(0) => {
                Err(Error::InvalidArgument("checkpoint spacing must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether state `k` of an `n`-layer network is kept.
    pub fn stores(&self, k: usize, n: usize) -> bool {
        match *self {
            StoragePolicy::StoreAll => true,
            StoragePolicy::StoreNone => k == 0 || k == n,
            StoragePolicy::CheckpointEvery(every) => k % every == 0 || k == n,
        }
    }

    pub fn indices(&self, n: usize) -> BTreeSet<usize> {
        (0..=n).filter(|&k| self.stores(k, n)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct InstrumentationCounters {
    /// Largest number of forward states held at once.
    pub peak_stored_states: u64,
    pub operator_applications: u64,
    pub fixed_point_inner_iterations: u64,
    /// Largest number of transient states (iterates, cotangents) held at once.
    pub peak_workspace_states: u64,
}

impl InstrumentationCounters {
    pub fn add_work(&mut self, meter: OpMeter) {
        self.operator_applications += meter.operator_applications;
        self.fixed_point_inner_iterations += meter.fixed_point_inner_iterations;
    }

    pub fn note_stored(&mut self, live: usize) {
        self.peak_stored_states = self.peak_stored_states.max(live as u64);
    }

    pub fn note_workspace(&mut self, live: usize) {
        self.peak_workspace_states = self.peak_workspace_states.max(live as u64);
    }

    /// Sums work and takes the larger peaks.
    pub fn merge(&mut self, other: &InstrumentationCounters) {
        self.operator_applications += other.operator_applications;
        self.fixed_point_inner_iterations += other.fixed_point_inner_iterations;
        self.peak_stored_states = self.peak_stored_states.max(other.peak_stored_states);
        self.peak_workspace_states = self.peak_workspace_states.max(other.peak_workspace_states);
    }
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub output: Tensor,
    pub stored: BTreeMap<usize, Tensor>,
    pub policy: StoragePolicy,
    pub counters: InstrumentationCounters,
    pub layer_meters: Vec<OpMeter>,
}

impl ForwardRecord {
    pub fn state(&self, k: usize) -> Result<&Tensor> {
        self.stored.get(&k).ok_or(Error::MissingState(k))
    }

    pub fn input(&self) -> Result<&Tensor> {
        self.state(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateEntry {
    pub index: usize,
    pub kind: &'static str,
    pub bound: Option<f64>,
    pub margin: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub layers: Vec<CertificateEntry>,
    pub certified: bool,
}

impl CertificateReport {
    /// First rejected layer, if any.
    pub fn first_failure(&self) -> Option<&CertificateEntry> {
        self.layers.iter().find(|e| !e.accepted)
    }

    pub fn to_error(&self) -> Option<Error> {
        self.first_failure().map(|e| {
            Error::NotContractive {
                bound: e.bound.unwrap_or(f64::INFINITY),
            }
            .at_layer(e.index)
        })
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    policy: StoragePolicy,
}

impl Network {
    pub fn new(layers: Vec<Layer>, policy: StoragePolicy) -> Result<Self> {
        policy.validate()?;
        let Some(first) = layers.first() else {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        };
        let shape = first.shape().to_vec();
        for (k, l) in layers.iter().enumerate() {
            if l.shape() != shape.as_slice() {
                return Err(Error::shape("layer chain", &shape, l.shape()).at_layer(k));
            }
        }
        Ok(Self { layers, policy })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.layers[0].shape()
    }

    pub fn policy(&self) -> StoragePolicy {
        self.policy
    }

    pub fn with_policy(&self, policy: StoragePolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            layers: self.layers.clone(),
            policy,
        })
    }

    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        Self::new(layers, self.policy)
    }

    /// Replaces the measurements of every gradient layer.
    pub fn with_measurements(&self, measurements: Arc<Vec<Tensor>>) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| match l {
                Layer::Gradient(g) => g
                    .with_measurements(measurements.clone())
                    .map(Layer::Gradient)
                    .map_err(|e| e.at_layer(k)),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            policy: self.policy,
        })
    }

    pub fn forward(&self, x0: &Tensor) -> Result<ForwardRecord> {
        x0.expect_shape(self.shape(), "network input")?;
        let n = self.depth();
        let mut stored = BTreeMap::new();
        let mut counters = InstrumentationCounters::default();
        let mut layer_meters = Vec::with_capacity(n);
        stored.insert(0, x0.clone());
        counters.note_stored(stored.len());
        let mut x = x0.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut meter = OpMeter::default();
            let next = layer.forward(&x, &mut meter).map_err(|e| e.at_layer(k))?;
            if !next.is_finite() {
                return Err(Error::Divergence { iteration: 0 }.at_layer(k));
            }
            counters.note_workspace(2);
            counters.add_work(meter);
            layer_meters.push(meter);
            x = next;
            if self.policy.stores(k + 1, n) {
                stored.insert(k + 1, x.clone());
                counters.note_stored(stored.len());
            }
        }
        Ok(ForwardRecord {
            output: x,
            stored,
            policy: self.policy,
            counters,
            layer_meters,
        })
    }

    pub fn certify_invertible(&self) -> CertificateReport {
        let layers: Vec<CertificateEntry> = self
            .layers
            .iter()
            .enumerate()
            .map(|(index, l)| {
                let LayerCertificate { bound, accepted } = l.certificate();
                CertificateEntry {
                    index,
                    kind: l.kind_name(),
                    bound,
                    margin: bound.map(|b| 1.0 - b),
                    accepted,
                }
            })
            .collect();
        let certified = layers.iter().all(|e| e.accepted);
        CertificateReport { layers, certified }
    }
}

/// Ties layer-local parameters to a global learnable vector.
///
/// Several layer slots may map to the same global entry (shared parameters);
/// slots mapped to `None` are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    names: Vec<String>,
    slots: Vec<Vec<Option<usize>>>,
}

impl ParameterMap {
    /// `assign(k, local_name)` returns the global name of a learnable slot, or `None` to freeze it.
    /// Equal global names are shared.
    pub fn build(net: &Network, mut assign: impl FnMut(usize, &Layer, &str) -> Option<String>) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let slots = net
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| {
                layer
                    .parameter_names()
                    .iter()
                    .map(|local| {
                        assign(k, layer, local).map(|global| {
                            *lookup.entry(global.clone()).or_insert_with(|| {
                                names.push(global);
                                names.len() - 1
                            })
                        })
                    })
                    .collect()
            })
            .collect();
        Self { names, slots }
    }

    /// Every parameter of every layer, unshared.
    pub fn per_layer(net: &Network) -> Self {
        Self::build(net, |k, _, local| Some(format!("layer{k}.{local}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Global values, read from the first slot bound to each entry.
    pub fn gather(&self, net: &Network) -> Vec<f64> {
        let mut values = vec![f64::NAN; self.names.len()];
        let mut seen = vec![false; self.names.len()];
        for (layer, slots) in net.layers.iter().zip(&self.slots) {
            let local = layer.parameters();
            for (&slot, v) in slots.iter().zip(local) {
                if let Some(g) = slot {
                    if !seen[g] {
                        values[g] = v;
                        seen[g] = true;
                    }
                }
            }
        }
        values
    }

    /// Writes global values into every bound slot. Gradient layers whose fidelity
    /// parameters coincide keep sharing one forward model.
    pub fn scatter(&self, net: &Network, values: &[f64]) -> Result<Network> {
        if values.len() != self.names.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.names.len(),
                values.len()
            )));
        }
        let mut models: Vec<(*const ForwardModel, Vec<f64>, Arc<ForwardModel>)> = Vec::new();
        let mut layers = Vec::with_capacity(net.layers.len());
        for (k, (layer, slots)) in net.layers.iter().zip(&self.slots).enumerate() {
            let mut local = layer.parameters();
            for (v, slot) in local.iter_mut().zip(slots) {
                if let Some(g) = slot {
                    *v = values[*g];
                }
            }
            let rebuilt = match layer {
                Layer::Gradient(g) => {
                    let key = Arc::as_ptr(g.model());
                    let cached = models
                        .iter()
                        .find(|(p, v, _)| *p == key && v.as_slice() == &local[1..])
                        .map(|(_, _, m)| m.clone());
                    match cached {
                        Some(model) => GradientLayer::new(local[0], model, g.measurements().clone()),
                        None => g.with_parameters(&local).inspect(|new| {
                            models.push((key, local[1..].to_vec(), new.model().clone()));
                        }),
                    }
                    .map(Layer::Gradient)
                }
                other => other.with_parameters(&local),
            };
            layers.push(rebuilt.map_err(|e| e.at_layer(k))?);
        }
        net.with_layers(layers)
    }

    /// Sums per-layer local gradients into global entries, visiting layers from last to first.
    pub fn reduce(&self, per_layer: &[Vec<f64>]) -> Vec<f64> {
        let mut total = vec![0.0; self.names.len()];
        for (grads, slots) in per_layer.iter().zip(&self.slots).rev() {
            for (g, slot) in grads.iter().zip(slots) {
                if let Some(i) = slot {
                    total[*i] += g;
                }
            }
        }
        total
    }

    /// Global indices bound to layer `k`.
    pub fn slots(&self, k: usize) -> &[Option<usize>] {
        &self.slots[k]
    }
}

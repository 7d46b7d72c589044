//! State-storage and work counters of the three engines across network depths.

use serde::Serialize;

use crate::engines::{backprop, Engine, EngineKind, ReverseOptions};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointConfig;
use crate::training::{loss_mse, Application};

pub const BENCH_DEPTHS: [usize; 4] = [5, 10, 20, 40];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub engine: EngineKind,
    pub depth: usize,
    pub checkpoint_every: Option<usize>,
    pub peak_stored_states: u64,
    pub peak_workspace_states: u64,
    pub forward_applications: u64,
    pub backward_applications: u64,
    pub operator_applications: u64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "engine,depth,checkpoint_every,peak_stored_states,peak_workspace_states,forward_applications,backward_applications,operator_applications";

    pub fn csv_line(&self) -> String {
        let engine = match self.engine {
            EngineKind::Standard => "standard",
            EngineKind::MemoryEfficient => "memory-efficient",
            EngineKind::Hybrid => "hybrid",
        };
        format!(
            "{engine},{},{},{},{},{},{},{}",
            self.depth,
            self.checkpoint_every.map_or(String::new(), |k| k.to_string()),
            self.peak_stored_states,
            self.peak_workspace_states,
            self.forward_applications,
            self.backward_applications,
            self.operator_applications
        )
    }
}

/// One forward and reverse pass per engine and depth, on the first training example.
pub fn bench(app: &Application, depths: &[usize], checkpoint_every: usize, inverse: FixedPointConfig) -> Result<Vec<BenchRow>> {
    let ex = app
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("bench needs a training example".into()))?;
    let mut rows = Vec::new();
    for &depth in depths {
        let net = app.network_of_depth(depth)?;
        let inst = app.instance(&net, ex)?;
        for engine in [
            Engine::Standard,
            Engine::MemoryEfficient,
            Engine::Hybrid {
                every: checkpoint_every,
            },
        ] {
            let run = inst.with_policy(engine.storage_policy())?;
            let record = run.forward(&ex.initialization)?;
            let (_, q) = loss_mse(&record.output, &ex.ground_truth)?;
            let report = backprop(engine, &run, &record, &q, &ReverseOptions::new(inverse))?;
            let total = report.diagnostics.counters;
            rows.push(BenchRow {
                engine: engine.kind(),
                depth,
                checkpoint_every: matches!(engine, Engine::Hybrid { .. }).then_some(checkpoint_every),
                peak_stored_states: total.peak_stored_states,
                peak_workspace_states: total.peak_workspace_states,
                forward_applications: record.counters.operator_applications,
                backward_applications: report.diagnostics.reverse_counters.operator_applications,
                operator_applications: total.operator_applications,
            });
        }
    }
    Ok(rows)
}

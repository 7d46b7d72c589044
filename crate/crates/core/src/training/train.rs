use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::engines::{Engine, StateResidual};
use crate::error::{Error, Result};
use crate::network::{CertificateReport, InstrumentationCounters, Network};

use super::apps::{Application, EvalOptions};
use super::config::ExperimentConfig;
use super::data::metric_nrmse;
use super::optim::OptimizerState;

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Compare reverse states to a stored forward pass (first example of each epoch).
    pub shadow_diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub peak_stored_states: u64,
    pub operator_applications: u64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualTrace {
    pub epoch: usize,
    pub residuals: Vec<StateResidual>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<EpochRow>,
    pub parameter_names: Vec<String>,
    pub final_parameters: Vec<f64>,
    pub final_test_nrmse: f64,
    pub certificate: CertificateReport,
    pub residual_traces: Vec<ResidualTrace>,
}

impl TrainingLog {
    pub fn final_test_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_loss)
    }
}

/// Builds the configured application and trains it.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainingLog> {
    train_with(cfg, &TrainOptions::default())
}

pub fn train_with(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainingLog> {
    let app = Application::build(cfg)?;
    train_application(&app, cfg, opts).map(|(log, _)| log)
}

/// Error when `engine` cannot run on `net` because an inverse it needs is not certified.
pub fn engine_refusal(engine: Engine, net: &Network) -> Option<Error> {
    let report = net.certify_invertible();
    let n = net.depth();
    let policy = engine.storage_policy();
    let failure = match engine {
        Engine::Standard => None,
        Engine::MemoryEfficient => report.first_failure(),
        Engine::Hybrid { .. } => report
            .layers
            .iter()
            .find(|e| !e.accepted && !policy.stores(e.index, n)),
    }?;
    Some(
        Error::NotContractive {
            bound: failure.bound.unwrap_or(f64::INFINITY),
        }
        .at_layer(failure.index),
    )
}

fn mean_nrmse(app: &Application, net: &Network) -> Result<f64> {
    let mut total = 0.0;
    for ex in &app.test {
        total += metric_nrmse(&app.reconstruct(net, ex)?, &ex.ground_truth)?;
    }
    Ok(total / app.test.len().max(1) as f64)
}

/// Trains `app` and returns the log together with the trained network.
pub fn train_application(
    app: &Application,
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<(TrainingLog, Network)> {
    cfg.validate()?;
    let engine = cfg.engine();
    let mut net = app.network.clone();
    if let Some(err) = engine_refusal(engine, &net) {
        return Err(err);
    }
    let names = app.params.names().to_vec();
    let mut state = OptimizerState::new(cfg.optimizer, names.len())?;
    let eval_opts = EvalOptions::new(cfg.inverse_config());

    let mut rows = vec![EpochRow {
        epoch: 0,
        train_loss: app.mean_loss(&net, &app.train)?,
        test_loss: app.mean_loss(&net, &app.test)?,
        peak_stored_states: 0,
        operator_applications: 0,
        grad_norm: 0.0,
    }];
    let mut traces = Vec::new();
    let mut order: Vec<usize> = (0..app.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        order.shuffle(&mut rng);
        let mut counters = InstrumentationCounters::default();
        let mut loss_sum = 0.0;
        let mut grad_norm = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let evals = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut o = eval_opts;
                    o.shadow = opts.shadow_diagnostics && b == 0 && j == 0;
                    app.evaluate(&net, &app.train[i], engine, &o)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = vec![0.0; names.len()];
            for e in &evals {
                loss_sum += e.loss;
                counters.merge(&e.counters);
                for (g, v) in grads.iter_mut().zip(&e.grads) {
                    *g += v;
                }
                if let Some(r) = &e.residuals {
                    traces.push(ResidualTrace {
                        epoch,
                        residuals: r.clone(),
                    });
                }
            }
            let scale = 1.0 / evals.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();

            let mut values = app.params.gather(&net);
            state.step(&mut values, &grads, &names)?;
            net = app.apply_update(&net, &values)?;
            if let Some(err) = engine_refusal(engine, &net) {
                return Err(err);
            }
        }
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / app.train.len() as f64,
            test_loss: app.mean_loss(&net, &app.test)?,
            peak_stored_states: counters.peak_stored_states,
            operator_applications: counters.operator_applications,
            grad_norm,
        });
    }

    let log = TrainingLog {
        rows,
        parameter_names: names,
        final_parameters: app.params.gather(&net),
        final_test_nrmse: mean_nrmse(app, &net)?,
        certificate: net.certify_invertible(),
        residual_traces: traces,
    };
    Ok((log, net))
}

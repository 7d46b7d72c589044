//! Loss, optimizers, synthetic data and the two training applications.

mod apps;
mod config;
mod data;
mod optim;
mod train;

pub use apps::{
    build_mri_prior_app, build_sr_design_app, coil_sensitivities, mri_operator, patch_masks, random_design,
    sampled_rows, sr_forward_model, Application, EvalOptions, ExampleEval, TrainingExample, STEP_CLAMP,
};
pub use config::{ApplicationKind, ExperimentConfig, LearnTarget, MriConfig, SrConfig, SCHEMA_VERSION};
pub use data::{complex_noise, loss_mse, metric_nrmse, simulate_measurements, smooth_phantom};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use train::{
    engine_refusal, train, train_application, train_with, EpochRow, ResidualTrace, TrainOptions, TrainingLog,
};

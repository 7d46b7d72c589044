use serde::{Deserialize, Serialize};

use crate::engines::{Engine, EngineKind};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointConfig;

use super::optim::OptimizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplicationKind {
    SrDesign,
    MriPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnTarget {
    /// Multiplexing coefficients of the design application.
    Design,
    /// Gradient-layer step sizes.
    Step,
    /// Prior parameters: prox strengths or residual kernels.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrConfig {
    /// Side of the square Fourier patches each source selects.
    pub patch: usize,
    /// Number of multiplexed measurements `L`.
    pub channels: usize,
    /// `lambda * sigma_max(C^H C)` of the smoothness prior.
    pub prior_contraction: f64,
    pub prior_inner_iters: usize,
    /// Row sum of the initial random design.
    pub design_row_sum: f64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 4,
            prior_contraction: 0.3,
            prior_inner_iters: 30,
            design_row_sum: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MriConfig {
    pub coils: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub lipschitz_budget: f64,
    /// Fully sampled phase-encode lines around DC.
    pub center_lines: usize,
    /// Fraction of the remaining lines sampled at random.
    pub sampled_fraction: f64,
    /// Share residual kernels across unrolled iterations.
    pub share_prior: bool,
    pub init_std: f64,
}

impl Default for MriConfig {
    fn default() -> Self {
        Self {
            coils: 4,
            hidden_channels: 8,
            kernel_size: 3,
            lipschitz_budget: 0.5,
            center_lines: 4,
            sampled_fraction: 0.3,
            share_prior: true,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub application: ApplicationKind,
    pub image_size: usize,
    /// Unrolled iterations; each contributes a gradient layer and a prior layer.
    pub unrolls: usize,
    /// Fixed-point budget `T` for layer inverses.
    pub inverse_iters: usize,
    pub engine: EngineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub noise_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub seed: u64,
    /// Defaults to `design` for the design application and `prior` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learn: Option<Vec<LearnTarget>>,
    /// `alpha * sigma_max` of the gradient layers.
    pub step_fraction: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sr: SrConfig,
    #[serde(default)]
    pub mri: MriConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("unrolls", self.unrolls),
            ("inverse_iters", self.inverse_iters),
            ("batch_size", self.batch_size),
            ("train_examples", self.train_examples),
            ("test_examples", self.test_examples),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        match (self.engine, self.checkpoint_every) {
            (EngineKind::Hybrid, None) => {
                return Err(Error::InvalidConfig("hybrid engine needs checkpoint_every".into()))
            }
            (_, Some(0)) => return Err(Error::InvalidConfig("checkpoint_every must be positive".into())),
            _ => {}
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_fraction must be > 0, got {}",
                self.step_fraction
            )));
        }
        self.optimizer.validate()
    }

    pub fn engine(&self) -> Engine {
        match self.engine {
            EngineKind::Standard => Engine::Standard,
            EngineKind::MemoryEfficient => Engine::MemoryEfficient,
            EngineKind::Hybrid => Engine::Hybrid {
                every: self.checkpoint_every.unwrap_or(1),
            },
        }
    }

    pub fn inverse_config(&self) -> FixedPointConfig {
        FixedPointConfig::new(self.inverse_iters)
    }

    pub fn learn_targets(&self) -> Vec<LearnTarget> {
        self.learn.clone().unwrap_or_else(|| match self.application {
            ApplicationKind::SrDesign => vec![LearnTarget::Design],
            ApplicationKind::MriPrior => vec![LearnTarget::Prior],
        })
    }

    /// Small design-application config, used by defaults and tests.
    pub fn sr_default(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            application: ApplicationKind::SrDesign,
            image_size: 32,
            unrolls: 10,
            inverse_iters: 30,
            engine: EngineKind::MemoryEfficient,
            checkpoint_every: None,
            noise_std: 0.01,
            epochs: 20,
            batch_size: 4,
            train_examples: 4,
            test_examples: 4,
            seed,
            learn: None,
            step_fraction: 0.5,
            optimizer: OptimizerConfig::adam(0.05),
            sr: SrConfig::default(),
            mri: MriConfig::default(),
        }
    }

    pub fn mri_default(seed: u64) -> Self {
        Self {
            application: ApplicationKind::MriPrior,
            image_size: 16,
            unrolls: 10,
            inverse_iters: 6,
            noise_std: 0.02,
            epochs: 10,
            optimizer: OptimizerConfig::adam(0.01),
            ..Self::sr_default(seed)
        }
    }
}

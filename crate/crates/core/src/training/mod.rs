//! Training objectives and the resumable training loop.

pub mod data;
pub mod steps;
pub mod timesteps;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{toy_dims, Checkpoint, Network};
use crate::rng::{stream, Purpose};
use crate::schedules::Schedule;

pub use data::GaussianMixtureSpec;
pub use steps::{
    input_perturbation_train_step, mixflow_train_step, standard_train_step, train_step, StepRule, TrainingBatch,
};
pub use timesteps::{sample_slowed_timestep, sample_t_beta, SlowedDistribution, TimestepDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    #[default]
    Standard,
    #[serde(rename = "mixflow")]
    MixFlow,
    InputPerturbation,
}

impl TrainVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainVariant::Standard => "standard",
            TrainVariant::MixFlow => "mixflow",
            TrainVariant::InputPerturbation => "input_perturbation",
        }
    }
}

pub const DEFAULT_LOG_EVERY: u64 = 100;
/// Mixture range coefficient for the toy runs.
pub const TOY_GAMMA: f64 = 1.0;
/// Mixture range coefficient used when mirroring the large-scale ablations.
pub const ABLATION_GAMMA: f64 = 0.8;
pub const DEFAULT_PERTURBATION_STRENGTH: f64 = 0.15;

fn default_gamma() -> f64 {
    TOY_GAMMA
}
fn default_strength() -> f64 {
    DEFAULT_PERTURBATION_STRENGTH
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    2048
}
fn default_iterations() -> u64 {
    26_000
}
fn default_layer_dims() -> Vec<usize> {
    toy_dims(1)
}
fn default_log_every() -> u64 {
    DEFAULT_LOG_EVERY
}
fn default_schedule() -> Schedule {
    Schedule::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub variant: TrainVariant,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_strength")]
    pub perturbation_strength: f64,
    /// Defaults to `beta21` for MixFlow and `uniform01` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_distribution: Option<TimestepDistribution>,
    #[serde(default)]
    pub slowed_distribution: SlowedDistribution,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub data: GaussianMixtureSpec,
    #[serde(default = "default_layer_dims")]
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Global iteration counts at which intermediate checkpoints are emitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn toy_standard() -> Self {
        Self::default()
    }

    /// Post-training run: 6,000 MixFlow iterations on top of a standard checkpoint.
    pub fn toy_mixflow() -> Self {
        Self {
            variant: TrainVariant::MixFlow,
            iterations: 6_000,
            ..Self::default()
        }
    }

    pub fn effective_t_distribution(&self) -> TimestepDistribution {
        self.t_distribution.unwrap_or(match self.variant {
            TrainVariant::MixFlow => TimestepDistribution::Beta21,
            _ => TimestepDistribution::Uniform01,
        })
    }

    pub fn step_rule(&self) -> StepRule {
        match self.variant {
            TrainVariant::Standard => StepRule::Standard {
                t_distribution: self.effective_t_distribution(),
            },
            TrainVariant::MixFlow => StepRule::MixFlow {
                gamma: self.gamma,
                t_distribution: self.effective_t_distribution(),
                slowed: self.slowed_distribution,
            },
            TrainVariant::InputPerturbation => StepRule::InputPerturbation {
                strength: self.perturbation_strength,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        crate::net::mlp::validate_dims(&self.layer_dims)?;
        if self.layer_dims[self.layer_dims.len() - 1] != 1 {
            return Err(Error::Config("mixture data is one-dimensional; output width must be 1".into()));
        }
        if self.variant == TrainVariant::MixFlow && !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.perturbation_strength >= 0.0) {
            return Err(Error::Config("perturbation_strength must be nonnegative".into()));
        }
        if self.variant == TrainVariant::InputPerturbation
            && self.t_distribution.is_some_and(|d| d != TimestepDistribution::Uniform01)
        {
            return Err(Error::Config("input perturbation draws t from uniform01".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values sampled every `log_every` global iterations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<(u64, f64)>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in &self.entries {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

/// Fresh checkpoint for `config`, or a validated resume target.
pub fn prepare_checkpoint(config: &TrainConfig, resume: Option<Checkpoint>) -> Result<Checkpoint> {
    config.validate()?;
    match resume {
        None => {
            let net = Network::init(&config.layer_dims, config.seed)?;
            Ok(Checkpoint::fresh(net, config.lr, config.schedule, config.seed, config.variant))
        }
        Some(mut ckpt) => {
            if ckpt.network.dims() != config.layer_dims.as_slice() {
                return Err(Error::Config(format!(
                    "resume checkpoint has dims {:?}, config wants {:?}",
                    ckpt.network.dims(),
                    config.layer_dims
                )));
            }
            if ckpt.schedule != config.schedule {
                return Err(Error::Config(format!(
                    "resume checkpoint uses schedule {}, config wants {}",
                    ckpt.schedule, config.schedule
                )));
            }
            ckpt.adam.lr = config.lr;
            Ok(ckpt)
        }
    }
}

/// Run `config.iterations` steps on `checkpoint` in place.
///
/// Iteration `k` (global, 0-based) draws from stream `(seed, Train, k)`: first
/// the data batch, then the step's own draws. `on_snapshot` is called whenever
/// the global count reaches one of `config.snapshots`. If a step fails, the
/// checkpoint holds the last good state and `log` holds the losses so far.
pub fn train_loop(
    config: &TrainConfig,
    checkpoint: &mut Checkpoint,
    log: &mut LossLog,
    mut on_snapshot: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let rule = config.step_rule();
    for _ in 0..config.iterations {
        let mut rng = stream(config.seed, Purpose::Train, checkpoint.iteration);
        let x1 = config.data.sample_batch(&mut rng, config.batch_size);
        let loss = train_step(checkpoint, &x1, &mut rng, &rule)?;
        if checkpoint.iteration % config.log_every == 0 {
            log.entries.push((checkpoint.iteration, loss));
        }
        if config.snapshots.contains(&checkpoint.iteration) {
            on_snapshot(checkpoint)?;
        }
    }
    Ok(())
}

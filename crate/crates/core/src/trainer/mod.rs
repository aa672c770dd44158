//! Episodic training: sampling, the level-weighted loss, backpropagation
//! through the prototype head, and the optimiser loop.

mod episode;
mod fit;
mod head;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episode::{
    episode_features, plan_episode, sample_episode, BatchConfig, Episode, EpisodeItem, EpisodePlan, QueryBatch,
};
pub use fit::{episode_seed, fit, fit_with, EpochLog, RunConfig, TrainingLog};
pub use head::{episode_forward, EpisodeInputs, EpisodeObjective, HeadOutput};
pub use loss::{hierarchical_loss, level_weights, LossOutput};
pub use optim::{train_step, AdamConfig, OptState, StepMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    /// Query recordings per class.
    pub queries: usize,
    /// Draw weights of the SED, SED&SID and SID configurations, in percent.
    pub weights: [u32; 3],
    pub episodes_per_epoch: usize,
    pub epochs: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 12,
            shots: 5,
            queries: 5,
            weights: [60, 20, 20],
            episodes_per_epoch: 100,
            epochs: 1000,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::Config(format!("episodes need at least 2 ways, got {}", self.ways)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::Config("shots and queries must be positive".into()));
        }
        if self.weights.iter().sum::<u32>() != 100 {
            return Err(Error::Config(format!(
                "configuration weights {:?} do not sum to 100",
                self.weights
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LossSpec {
    /// Cross-entropy at every level, level `h` weighted by `e^{αh}`.
    Hierarchical { alpha: f64 },
    /// Leaf-level cross-entropy only.
    Flat,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Hierarchical { alpha: 1.0 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Hierarchical { alpha } if !alpha.is_finite() => {
                Err(Error::Config(format!("non-finite alpha {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

//! Run settings: defaults, overlaid by an optional TOML file, overlaid by
//! flags. The merged result is written next to every command's outputs.

use std::path::Path;

use anyhow::{Context, Result};
use hiproto::corpus::{DEFAULT_FOLDS, EVAL_FOLD};
use hiproto::dsp::AugmentationSpec;
use hiproto::encoder::EncoderConfig;
use hiproto::evaluator::EerSpec;
use hiproto::trainer::{AdamConfig, EpisodeSpec, LossSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Master seed of the run; always set from `--seed` when a command is
    /// randomized.
    pub seed: Option<u64>,
    pub episode: EpisodeSpec,
    pub loss: LossSpec,
    pub adam: AdamConfig,
    pub encoder: EncoderConfig,
    pub augment: Augment,
    pub train: Train,
    pub eval: Eval,
    pub folds: Folds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub enabled: bool,
    pub snr_db: (f64, f64),
    pub decay_s: (f64, f64),
    pub wet: (f64, f64),
}

impl Default for Augment {
    fn default() -> Self {
        let d = AugmentationSpec::default();
        Augment {
            enabled: true,
            snr_db: d.snr_db,
            decay_s: d.decay_s,
            wet: d.wet,
        }
    }
}

impl Augment {
    /// `None` when disabled.
    pub fn spec(&self) -> Option<AugmentationSpec> {
        self.enabled.then_some(AugmentationSpec {
            snr_db: self.snr_db,
            decay_s: self.decay_s,
            wet: self.wet,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    /// Epochs between checkpoints; 0 writes only the final weights.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub episodes: usize,
    pub trials: usize,
    pub pairs: usize,
}

impl Default for Eval {
    fn default() -> Self {
        let eer = EerSpec::default();
        Eval {
            episodes: 100,
            trials: eer.trials,
            pairs: eer.pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Folds {
    pub count: usize,
    /// Folds held out for evaluation; training uses the rest.
    pub eval: Vec<u8>,
}

impl Default for Folds {
    fn default() -> Self {
        Folds {
            count: DEFAULT_FOLDS,
            eval: vec![EVAL_FOLD],
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        self.encoder.validate()?;
        if let Some(a) = self.augment.spec() {
            a.validate()?;
        }
        Ok(())
    }

    pub fn eer(&self) -> EerSpec {
        EerSpec {
            trials: self.eval.trials,
            pairs: self.eval.pairs,
        }
    }

    /// Writes the merged settings as `config.toml` under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        let text = toml::to_string_pretty(self).context("serialising settings")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

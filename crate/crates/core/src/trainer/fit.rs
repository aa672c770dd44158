use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::PathBuf;

use super::episode::sample_episode;
use super::optim::{train_step, AdamConfig, OptState};
use super::{EpisodeSpec, LossSpec};
use crate::corpus::Recordings;
use crate::dsp::AugmentationSpec;
use crate::encoder::{save_checkpoint, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::taxonomy::TaxonomyTree;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub adam: AdamConfig,
    /// Per-segment noise and reverb; `None` trains on clean segments.
    pub augment: Option<AugmentationSpec>,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Where checkpoints and `train_log.tsv` go.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            adam: AdamConfig::default(),
            augment: Some(AugmentationSpec::default()),
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    /// Mean episodic accuracy per level.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainingLog {
    /// `epoch␉loss␉acc_L1…acc_L{H+1}` with a header row.
    pub fn to_tsv(&self) -> String {
        let levels = self.epochs.first().map_or(0, |e| e.accuracy.len());
        let mut out = String::from("epoch\tloss");
        for l in 1..=levels {
            let _ = write!(out, "\tacc_L{l}");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{}\t{:.6}", e.epoch, e.loss);
            for a in &e.accuracy {
                let _ = write!(out, "\t{a:.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Seed of the `index`-th training episode of a run.
pub fn episode_seed(run_seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(run_seed, 1), index as u64)
}

/// Trains a freshly initialised encoder for `spec.epochs` epochs.
pub fn fit(
    recordings: &Recordings,
    tree: &TaxonomyTree,
    encoder: &EncoderConfig,
    spec: &EpisodeSpec,
    loss: LossSpec,
    run: &RunConfig,
) -> Result<(EncoderParams, TrainingLog)> {
    let params = EncoderParams::init(encoder, derive_seed(run.seed, 0))?;
    let opt = OptState::new(&params, run.adam)?;
    let (p, _, log) = fit_with(params, opt, recordings, tree, spec, loss, run, |_, _| ControlFlow::Continue(()))?;
    Ok((p, log))
}

/// Continues training from `params`/`opt`, calling `on_epoch` after every
/// epoch; returning `Break` stops early. The next episode is featurised
/// while the current one trains.
#[allow(clippy::too_many_arguments)]
pub fn fit_with<F>(
    mut params: EncoderParams,
    mut opt: OptState,
    recordings: &Recordings,
    tree: &TaxonomyTree,
    spec: &EpisodeSpec,
    loss: LossSpec,
    run: &RunConfig,
    mut on_epoch: F,
) -> Result<(EncoderParams, OptState, TrainingLog)>
where
    F: FnMut(&EncoderParams, &EpochLog) -> ControlFlow<()>,
{
    spec.validate()?;
    loss.validate()?;
    recordings.validate(tree)?;
    if let Some(a) = &run.augment {
        a.validate()?;
    }
    if spec.episodes_per_epoch == 0 {
        return Err(Error::Config("episodes per epoch must be positive".into()));
    }
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let aug = run.augment.as_ref();
    let first_step = opt.step as usize;
    let sample = |i: usize| sample_episode(recordings, tree, spec, aug, episode_seed(run.seed, i));

    let mut log = TrainingLog::default();
    let total = spec.epochs * spec.episodes_per_epoch;
    let mut next = if total > 0 { Some(sample(first_step)?) } else { None };
    for epoch in 0..spec.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = vec![0.0; tree.level_count()];
        for k in 0..spec.episodes_per_epoch {
            let i = first_step + epoch * spec.episodes_per_epoch + k;
            let episode = next.take().expect("prefetched");
            let more = epoch * spec.episodes_per_epoch + k + 1 < total;
            let (stepped, fetched) = rayon::join(
                || train_step(&params, &opt, &episode, tree, loss),
                || more.then(|| sample(i + 1)).transpose(),
            );
            let (p, o, metrics) = stepped?;
            next = fetched?;
            params = p;
            opt = o;
            loss_sum += metrics.loss;
            acc_sum.iter_mut().zip(&metrics.accuracy).for_each(|(s, a)| *s += a);
            log.steps += 1;
        }
        let n = spec.episodes_per_epoch as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / n,
            accuracy: acc_sum.iter().map(|s| s / n).collect(),
        };
        if let Some(dir) = &run.out_dir {
            if run.checkpoint_every > 0 && (epoch + 1) % run.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{:04}.hpw", epoch + 1));
                let bytes = save_checkpoint(&params, Some(&opt.to_bytes()));
                std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let flow = on_epoch(&params, &entry);
        log.epochs.push(entry);
        if let Some(dir) = &run.out_dir {
            let path = dir.join("train_log.tsv");
            std::fs::write(&path, log.to_tsv()).map_err(|e| Error::io(&path, e))?;
        }
        if flow.is_break() {
            break;
        }
    }
    Ok((params, opt, log))
}

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::EpisodeSpec;
use crate::corpus::Recordings;
use crate::dsp::{augment, log_mel, sample_segment, AugmentationSpec, LogMelSpectrogram, HOP, N_FRAMES};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::taxonomy::{ClassId, TaxonomyTree};

/// Which leaves an episode draws its classes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchConfig {
    /// Non-speaker leaves.
    Sed,
    /// All leaves.
    SedSid,
    /// Speaker leaves.
    Sid,
}

impl BatchConfig {
    pub const ALL: [BatchConfig; 3] = [BatchConfig::Sed, BatchConfig::SedSid, BatchConfig::Sid];

    fn admits(self, tree: &TaxonomyTree, leaf: &ClassId) -> bool {
        match self {
            BatchConfig::Sed => !tree.is_speaker(leaf),
            BatchConfig::SedSid => true,
            BatchConfig::Sid => tree.is_speaker(leaf),
        }
    }
}

/// One segment to cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub recording: usize,
    pub leaf: ClassId,
    /// Seeds segment placement and augmentation.
    pub seed: u64,
}

/// The sampled classes and segments of one episode, before any DSP.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePlan {
    pub seed: u64,
    pub config: BatchConfig,
    pub classes: Vec<ClassId>,
    pub support: Vec<EpisodeItem>,
    pub queries: Vec<EpisodeItem>,
}

/// Labelled query spectrograms.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub items: Vec<(LogMelSpectrogram, ClassId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub plan: EpisodePlan,
    pub support: Vec<(ClassId, LogMelSpectrogram)>,
    pub queries: QueryBatch,
}

fn draw_config(weights: [u32; 3], rng: &mut ChaCha8Rng) -> BatchConfig {
    let u = rng.random_range(0..100u32);
    let mut acc = 0;
    for (config, w) in BatchConfig::ALL.into_iter().zip(weights) {
        acc += w;
        if u < acc {
            return config;
        }
    }
    unreachable!("weights sum to 100")
}

/// Draws a configuration, `ways` classes from its pool, and disjoint support
/// and query recordings per class. Only classes with at least
/// `shots + queries` recordings are eligible.
pub fn plan_episode(
    recordings: &Recordings,
    tree: &TaxonomyTree,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<EpisodePlan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = draw_config(spec.weights, &mut rng);
    let need = spec.shots + spec.queries;
    let by_leaf = recordings.by_leaf();
    let pool: Vec<&ClassId> = by_leaf
        .iter()
        .filter(|(leaf, recs)| config.admits(tree, leaf) && recs.len() >= need)
        .map(|(leaf, _)| leaf)
        .collect();
    if pool.len() < spec.ways {
        return Err(Error::Episode(format!(
            "{config:?} pool has {} classes with {need}+ recordings, need {}",
            pool.len(),
            spec.ways
        )));
    }
    let mut classes: Vec<ClassId> = pool
        .choose_multiple(&mut rng, spec.ways)
        .map(|c| (*c).clone())
        .collect();
    classes.sort();

    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut queries = Vec::with_capacity(spec.ways * spec.queries);
    for leaf in &classes {
        let mut recs = by_leaf[leaf].clone();
        recs.shuffle(&mut rng);
        for (i, &recording) in recs[..need].iter().enumerate() {
            let item = EpisodeItem {
                recording,
                leaf: leaf.clone(),
                seed: rng.random(),
            };
            if i < spec.shots {
                support.push(item);
            } else {
                queries.push(item);
            }
        }
    }
    Ok(EpisodePlan {
        seed,
        config,
        classes,
        support,
        queries,
    })
}

fn item_features(
    recordings: &Recordings,
    item: &EpisodeItem,
    aug: Option<&AugmentationSpec>,
) -> Result<LogMelSpectrogram> {
    let segment = sample_segment(recordings.waveform(item.recording), item.seed)?;
    match aug {
        Some(spec) => log_mel(&augment(&segment.waveform, spec, derive_seed(item.seed, 1))?),
        None => recordings
            .spectrogram(item.recording)?
            .frames(segment.offset / HOP, N_FRAMES),
    }
}

/// Cuts, optionally augments, and featurises every segment of `plan`.
pub fn episode_features(
    plan: EpisodePlan,
    recordings: &Recordings,
    aug: Option<&AugmentationSpec>,
) -> Result<Episode> {
    let feats = |items: &[EpisodeItem]| {
        items
            .par_iter()
            .map(|it| Ok((it.leaf.clone(), item_features(recordings, it, aug)?)))
            .collect::<Result<Vec<_>>>()
    };
    let support = feats(&plan.support)?;
    let queries = feats(&plan.queries)?
        .into_iter()
        .map(|(leaf, x)| (x, leaf))
        .collect();
    Ok(Episode {
        plan,
        support,
        queries: QueryBatch { items: queries },
    })
}

/// [`plan_episode`] followed by [`episode_features`].
pub fn sample_episode(
    recordings: &Recordings,
    tree: &TaxonomyTree,
    spec: &EpisodeSpec,
    aug: Option<&AugmentationSpec>,
    seed: u64,
) -> Result<Episode> {
    episode_features(plan_episode(recordings, tree, spec, seed)?, recordings, aug)
}

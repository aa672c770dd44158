//! Post-training metrics: per-level episodic accuracy, hierarchical mistake
//! severity, and speaker-verification equal error rate.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{distance, predict, DistanceKind, PredictOptions};
use crate::corpus::Recordings;
use crate::dsp::{sample_segment, HOP, N_FRAMES};
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::protostore::{aggregate_meta, SupportSet};
use crate::seed::derive_seed;
use crate::taxonomy::{ClassId, TaxonomyTree};
use crate::trainer::{episode_features, plan_episode, EpisodeSpec};
use crate::Embedding;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSem {
    pub mean: f64,
    /// Sample standard deviation over √n; 0 for a single value.
    pub sem: f64,
}

impl MeanSem {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Eval("no values to summarise".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sem = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Ok(MeanSem { mean, sem })
    }
}

/// One classified query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub episode: usize,
    pub truth: ClassId,
    /// Per level; `None` when rejected as unknown.
    pub predicted: Vec<Option<ClassId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub episodes: usize,
    pub levels: usize,
    pub records: Vec<QueryRecord>,
}

/// Embeds `recordings`-drawn episodes, builds each episode's prototype bank
/// from its support, and classifies its queries at every level.
pub fn evaluate_episodes(
    params: &EncoderParams,
    recordings: &Recordings,
    tree: &TaxonomyTree,
    spec: &EpisodeSpec,
    episodes: usize,
    options: &PredictOptions,
    seed: u64,
) -> Result<EvalRun> {
    let kind = DistanceKind::for_params(params);
    let mut records = Vec::with_capacity(episodes * spec.ways * spec.queries);
    for e in 0..episodes {
        let plan = plan_episode(recordings, tree, spec, derive_seed(seed, e as u64))?;
        let ep = episode_features(plan, recordings, None)?;
        let support = ep
            .support
            .par_iter()
            .map(|(k, x)| Ok((k.clone(), forward(params, x)?.0)))
            .collect::<Result<Vec<_>>>()?;
        let bank = aggregate_meta(tree, &SupportSet::from_pairs(support)?)?;
        let preds = ep
            .queries
            .items
            .par_iter()
            .map(|(x, truth)| {
                let q = forward(params, x)?.0;
                let p = predict(&q, &bank, tree, kind, options)?;
                Ok(QueryRecord {
                    episode: e,
                    truth: truth.clone(),
                    predicted: p.levels.into_iter().map(|l| l.decision.class().cloned()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(preds);
    }
    Ok(EvalRun {
        episodes,
        levels: tree.level_count(),
        records,
    })
}

fn by_episode(run: &EvalRun) -> Vec<Vec<&QueryRecord>> {
    let mut out = vec![Vec::new(); run.episodes];
    for r in &run.records {
        out[r.episode].push(r);
    }
    out
}

/// Mean and SEM over episodes of the per-episode fraction correct, per level.
/// A rejected query counts as wrong.
pub fn per_level_accuracy(run: &EvalRun, tree: &TaxonomyTree) -> Result<Vec<MeanSem>> {
    if run.records.is_empty() || run.episodes == 0 {
        return Err(Error::Eval("empty run".into()));
    }
    let episodes = by_episode(run);
    (0..run.levels)
        .map(|h| {
            let per_episode = episodes
                .iter()
                .filter(|recs| !recs.is_empty())
                .map(|recs| {
                    let mut hits = 0usize;
                    for r in recs {
                        if r.predicted[h].as_ref() == Some(tree.ancestor_at(&r.truth, h)?) {
                            hits += 1;
                        }
                    }
                    Ok(hits as f64 / recs.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            MeanSem::of(&per_episode)
        })
        .collect()
}

/// Levels between the leaves and the deepest common ancestor of two leaves:
/// 1 for siblings, `H + 1` when they only meet at the root.
pub fn mistake_height(tree: &TaxonomyTree, predicted: &ClassId, truth: &ClassId) -> Result<usize> {
    Ok((tree.height() as i32 - tree.lca_depth(predicted, truth)?) as usize)
}

/// Mean and SEM over episodes of the per-episode mean mistake height of
/// misclassified leaf predictions. Episodes without a (non-rejected) leaf
/// error are skipped; `None` when there is none at all.
pub fn hierarchical_mistake(run: &EvalRun, tree: &TaxonomyTree) -> Result<Option<MeanSem>> {
    let leaf = tree.height();
    let mut per_episode = Vec::new();
    for recs in by_episode(run) {
        let mut heights = Vec::new();
        for r in recs {
            if let Some(p) = &r.predicted[leaf] {
                if p != &r.truth {
                    heights.push(mistake_height(tree, p, &r.truth)? as f64);
                }
            }
        }
        if !heights.is_empty() {
            per_episode.push(heights.iter().sum::<f64>() / heights.len() as f64);
        }
    }
    if per_episode.is_empty() {
        Ok(None)
    } else {
        MeanSem::of(&per_episode).map(Some)
    }
}

/// Equal error rate, higher scores meaning "same speaker".
///
/// Sweeps the acceptance threshold over every distinct score to get the
/// (false accept, false reject) operating points, takes their lower convex
/// hull, and returns where the hull crosses false accept = false reject.
/// Between two hull vertices the error rates are linearly interpolated.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Eval("EER needs genuine and impostor scores".into()));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::Eval("NaN score".into()));
    }
    let mut scored: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);

    // Accept everything scoring at least the current threshold.
    let mut points = vec![(0.0, 1.0)];
    let (mut acc_g, mut acc_i) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                acc_g += 1;
            } else {
                acc_i += 1;
            }
            i += 1;
        }
        points.push((acc_i as f64 / ni, 1.0 - acc_g as f64 / ng));
    }

    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (a.1 - a.0, b.1 - b.0);
        if fa >= 0.0 && fb <= 0.0 {
            if fa == fb {
                return Ok(a.0);
            }
            let lambda = fa / (fa - fb);
            return Ok(a.0 + lambda * (b.0 - a.0));
        }
    }
    unreachable!("the hull runs from (0, 1) to (1, 0)")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EerSpec {
    pub trials: usize,
    /// Pairs per trial, half genuine and half impostor.
    pub pairs: usize,
}

impl Default for EerSpec {
    fn default() -> Self {
        EerSpec {
            trials: 100,
            pairs: 1000,
        }
    }
}

/// Scored pairs of every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EerRun {
    /// `(score, genuine)` per pair.
    pub trials: Vec<Vec<(f64, bool)>>,
}

impl EerRun {
    pub fn rates(&self) -> Result<Vec<f64>> {
        self.trials
            .iter()
            .map(|t| {
                let g: Vec<f64> = t.iter().filter(|p| p.1).map(|p| p.0).collect();
                let i: Vec<f64> = t.iter().filter(|p| !p.1).map(|p| p.0).collect();
                eer(&g, &i)
            })
            .collect()
    }

    pub fn summary(&self) -> Result<MeanSem> {
        MeanSem::of(&self.rates()?)
    }
}

/// Samples verification trials over labelled embeddings: genuine pairs are
/// two different recordings of one speaker, impostor pairs two speakers.
/// Scores are negative squared Euclidean distances.
pub fn eer_trials(embeddings: &[(ClassId, Embedding)], spec: &EerSpec, seed: u64) -> Result<EerRun> {
    if spec.trials == 0 || spec.pairs < 2 {
        return Err(Error::Config("EER needs at least one trial of two pairs".into()));
    }
    let mut groups: std::collections::BTreeMap<&ClassId, Vec<usize>> = Default::default();
    for (i, (k, _)) in embeddings.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let speakers: Vec<&Vec<usize>> = groups.values().collect();
    let repeat: Vec<&Vec<usize>> = speakers.iter().copied().filter(|g| g.len() >= 2).collect();
    if speakers.len() < 2 || repeat.len() < 2 {
        return Err(Error::Eval(format!(
            "need 2 speakers with 2+ recordings, have {} speakers ({} with 2+)",
            speakers.len(),
            repeat.len()
        )));
    }
    let score = |a: usize, b: usize| -> Result<f64> {
        Ok(-distance(&embeddings[a].1, &embeddings[b].1, DistanceKind::SquaredEuclidean)?)
    };
    let n_genuine = spec.pairs / 2;
    let trials = (0..spec.trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let mut pairs = Vec::with_capacity(spec.pairs);
            for _ in 0..n_genuine {
                let g = repeat[rng.random_range(0..repeat.len())];
                let a = rng.random_range(0..g.len());
                let mut b = rng.random_range(0..g.len() - 1);
                if b >= a {
                    b += 1;
                }
                pairs.push((score(g[a], g[b])?, true));
            }
            for _ in n_genuine..spec.pairs {
                let sa = rng.random_range(0..speakers.len());
                let mut sb = rng.random_range(0..speakers.len() - 1);
                if sb >= sa {
                    sb += 1;
                }
                let a = speakers[sa][rng.random_range(0..speakers[sa].len())];
                let b = speakers[sb][rng.random_range(0..speakers[sb].len())];
                pairs.push((score(a, b)?, false));
            }
            Ok(pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EerRun { trials })
}

/// Embeds one seeded segment per speaker recording and runs [`eer_trials`].
pub fn eer_protocol(
    params: &EncoderParams,
    recordings: &Recordings,
    tree: &TaxonomyTree,
    spec: &EerSpec,
    seed: u64,
) -> Result<EerRun> {
    let speakers: Vec<usize> = (0..recordings.len()).filter(|&i| tree.is_speaker(recordings.leaf(i))).collect();
    let embeddings = speakers
        .par_iter()
        .map(|&i| {
            let seg = sample_segment(recordings.waveform(i), derive_seed(seed, i as u64))?;
            let x = recordings.spectrogram(i)?.frames(seg.offset / HOP, N_FRAMES)?;
            Ok((recordings.leaf(i).clone(), forward(params, &x)?.0))
        })
        .collect::<Result<Vec<_>>>()?;
    eer_trials(&embeddings, spec, derive_seed(seed, u64::MAX))
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    /// 1-based level for per-level metrics.
    pub level: Option<usize>,
    /// `None` when the metric is undefined (e.g. no mistakes to measure).
    pub value: Option<MeanSem>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn accuracy(run: &EvalRun, tree: &TaxonomyTree) -> Result<Self> {
        let mut rows: Vec<ReportRow> = per_level_accuracy(run, tree)?
            .into_iter()
            .enumerate()
            .map(|(h, v)| ReportRow {
                metric: "accuracy".into(),
                level: Some(h + 1),
                value: Some(v),
            })
            .collect();
        rows.push(ReportRow {
            metric: "hierarchical_mistake".into(),
            level: None,
            value: hierarchical_mistake(run, tree)?,
        });
        Ok(Report { rows })
    }

    pub fn eer(run: &EerRun) -> Result<Self> {
        Ok(Report {
            rows: vec![ReportRow {
                metric: "eer".into(),
                level: None,
                value: Some(run.summary()?),
            }],
        })
    }

    pub fn get(&self, metric: &str, level: Option<usize>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric && r.level == level)
    }

    /// `metric␉level␉mean␉sem`; absent values print as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tlevel\tmean\tsem\n");
        for r in &self.rows {
            let level = r.level.map_or("-".to_string(), |l| format!("L{l}"));
            match r.value {
                Some(v) => {
                    let _ = writeln!(out, "{}\t{level}\t{:.6}\t{:.6}", r.metric, v.mean, v.sem);
                }
                None => {
                    let _ = writeln!(out, "{}\t{level}\tNA\tNA", r.metric);
                }
            }
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let name = match r.level {
                Some(l) => format!("{} L{l}", r.metric),
                None => r.metric.clone(),
            };
            match r.value {
                Some(v) => {
                    let _ = writeln!(out, "{name:<24} {:>8.4} ± {:.4}", v.mean, v.sem);
                }
                None => {
                    let _ = writeln!(out, "{name:<24} {:>8}", "n/a");
                }
            }
        }
        out
    }
}

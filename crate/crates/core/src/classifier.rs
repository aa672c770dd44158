//! Distances, per-level posteriors and open-set prediction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::protostore::PrototypeBank;
use crate::taxonomy::{ClassId, TaxonomyTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    /// `−(scale·cos + bias)`.
    Angular { scale: f64, bias: f64 },
}

impl DistanceKind {
    /// The kind a trained encoder was optimised for.
    pub fn for_params(params: &EncoderParams) -> Self {
        match params.angular() {
            Some((scale, bias)) => DistanceKind::Angular { scale, bias },
            None => DistanceKind::SquaredEuclidean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistanceKind::Angular { scale, bias } if !(scale > 0.0 && scale.is_finite() && bias.is_finite()) => {
                Err(Error::Config(format!("angular scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    match kind {
        DistanceKind::SquaredEuclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
        DistanceKind::Angular { scale, bias } => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Config("angular distance of a zero vector".into()));
            }
            Ok(-(scale * dot(a, b) / (na * nb) + bias))
        }
    }
}

/// Log-softmax of negative distances, shifted by the minimum distance so the
/// largest exponent is 0.
pub fn log_softmax_neg(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let log_z = distances.iter().map(|d| (min - d).exp()).sum::<f64>().ln();
    distances.iter().map(|d| (min - d) - log_z).collect()
}

/// Index of the smallest value; ties go to the earliest index.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Posterior over the classes of one level, classes in `ClassId` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPosterior {
    pub level: usize,
    pub classes: Vec<ClassId>,
    pub distances: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl LevelPosterior {
    pub fn from_distances(level: usize, classes: Vec<ClassId>, distances: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Eval(format!("level {level} has no prototypes")));
        }
        if classes.len() != distances.len() {
            return Err(Error::Dimension {
                expected: classes.len(),
                actual: distances.len(),
            });
        }
        let log_probs = log_softmax_neg(&distances);
        Ok(LevelPosterior {
            level,
            classes,
            distances,
            log_probs,
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn prob(&self, id: &ClassId) -> Option<f64> {
        let i = self.classes.binary_search(id).ok()?;
        Some(self.log_probs[i].exp())
    }

    /// Most probable class; ties go to the smaller id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.log_probs.iter().enumerate() {
            if *l > self.log_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Nearest prototype; ties go to the smaller id.
    pub fn argmin_distance(&self) -> usize {
        argmin(&self.distances)
    }
}

pub fn level_posterior(
    query: &[f64],
    bank: &PrototypeBank,
    level: usize,
    kind: DistanceKind,
) -> Result<LevelPosterior> {
    let protos = bank.level(level)?;
    let mut classes = Vec::with_capacity(protos.len());
    let mut distances = Vec::with_capacity(protos.len());
    for (id, p) in protos {
        classes.push(id.clone());
        distances.push(distance(query, &p.vector, kind)?);
    }
    LevelPosterior::from_distances(level, classes, distances)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Decision {
    Class(ClassId),
    Unknown,
}

impl Decision {
    pub fn class(&self) -> Option<&ClassId> {
        match self {
            Decision::Class(c) => Some(c),
            Decision::Unknown => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Class(c) => c.fmt(f),
            Decision::Unknown => f.write_str("Unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: usize,
    pub decision: Decision,
    /// Posterior of the nearest class, reported even when rejected.
    pub posterior: f64,
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub levels: Vec<LevelPrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    /// Per-level distance cutoffs; a level whose nearest prototype is farther
    /// than its cutoff answers Unknown.
    pub thresholds: Vec<f64>,
    /// Replace upper-level answers with the ancestors of the leaf answer.
    pub consistent: bool,
}

impl PredictOptions {
    /// No rejection, independent levels.
    pub fn open(levels: usize) -> Self {
        PredictOptions {
            thresholds: vec![f64::INFINITY; levels],
            consistent: false,
        }
    }
}

pub fn predict(
    query: &[f64],
    bank: &PrototypeBank,
    tree: &TaxonomyTree,
    kind: DistanceKind,
    options: &PredictOptions,
) -> Result<Prediction> {
    kind.validate()?;
    let levels = tree.level_count();
    if bank.level_count() != levels || options.thresholds.len() != levels {
        return Err(Error::Config(format!(
            "taxonomy has {levels} levels, bank {} and thresholds {}",
            bank.level_count(),
            options.thresholds.len()
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for h in 0..levels {
        let post = level_posterior(query, bank, h, kind)?;
        let best = post.argmin_distance();
        let min_distance = post.distances[best];
        let decision = if min_distance > options.thresholds[h] {
            Decision::Unknown
        } else {
            Decision::Class(post.classes[best].clone())
        };
        out.push(LevelPrediction {
            level: h,
            decision,
            posterior: post.log_probs[best].exp(),
            min_distance,
        });
    }
    if options.consistent {
        if let Decision::Class(leaf) = out[levels - 1].decision.clone() {
            let lineage = tree.lineage(&leaf)?;
            for (h, id) in lineage.into_iter().enumerate().take(levels - 1) {
                let post = level_posterior(query, bank, h, kind)?;
                let i = post
                    .classes
                    .binary_search(&id)
                    .map_err(|_| Error::UnknownClass(id.to_string()))?;
                out[h] = LevelPrediction {
                    level: h,
                    decision: Decision::Class(id),
                    posterior: post.log_probs[i].exp(),
                    min_distance: post.distances[i],
                };
            }
        }
    }
    Ok(Prediction { levels: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protostore::{aggregate_meta, SupportSet};
    use crate::Embedding;

    fn id(s: &str) -> ClassId {
        ClassId::new(s).unwrap()
    }

    #[test]
    fn distances() {
        let se = DistanceKind::SquaredEuclidean;
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], se).unwrap(), 25.0);
        assert_eq!(distance(&[1.5, -2.0], &[1.5, -2.0], se).unwrap(), 0.0);
        let ang = DistanceKind::Angular { scale: 1.0, bias: 0.0 };
        assert!((distance(&[0.3, 0.4], &[0.3, 0.4], ang).unwrap() + 1.0).abs() < 1e-15);
        assert!(distance(&[0.0, 0.0], &[1.0, 0.0], ang).is_err());
        assert!(distance(&[1.0], &[1.0, 0.0], se).is_err());
        assert!(DistanceKind::Angular { scale: 0.0, bias: 0.0 }.validate().is_err());
    }

    #[test]
    fn posterior_values() {
        let p = LevelPosterior::from_distances(0, vec![id("a"), id("b")], vec![0.0, 2.0]).unwrap();
        let probs = p.probabilities();
        assert!((probs[0] - 0.880797).abs() < 1e-6);
        assert!((probs[1] - 0.119203).abs() < 1e-6);
        let q = LevelPosterior::from_distances(0, vec![id("a"), id("b")], vec![1e6, 1e6 + 2.0]).unwrap();
        assert_eq!(q.log_probs, p.log_probs);
        let eq = LevelPosterior::from_distances(0, vec![id("a"), id("b")], vec![3.0, 3.0]).unwrap();
        assert_eq!(eq.probabilities(), vec![0.5, 0.5]);
        assert_eq!(eq.argmax(), 0);
    }

    fn balanced() -> (TaxonomyTree, PrototypeBank) {
        let tree = TaxonomyTree::parse("a\tp\tx\nb\tp\tx\nc\tq\ty\n").unwrap();
        let pts = [("a", [-10.0, 0.0]), ("b", [4.0, 0.0]), ("c", [2.5, 0.5])];
        let support = SupportSet::from_pairs(pts.iter().flat_map(|(k, v)| {
            [
                (id(k), Embedding::new(vec![v[0] - 0.1, v[1]])),
                (id(k), Embedding::new(vec![v[0] + 0.1, v[1]])),
            ]
        }))
        .unwrap();
        let bank = aggregate_meta(&tree, &support).unwrap();
        (tree, bank)
    }

    #[test]
    fn predicts_leaf_and_ancestors() {
        let (tree, bank) = balanced();
        let q = bank.get(2, &id("a")).unwrap().vector.clone();
        let p = predict(&q, &bank, &tree, DistanceKind::SquaredEuclidean, &PredictOptions::open(3)).unwrap();
        let got: Vec<_> = p.levels.iter().map(|l| l.decision.to_string()).collect();
        assert_eq!(got, ["x", "p", "a"]);
        assert_eq!(p.levels[2].min_distance, 0.0);
    }

    #[test]
    fn zero_threshold_rejects() {
        let (tree, bank) = balanced();
        let opts = PredictOptions {
            thresholds: vec![0.0; 3],
            consistent: false,
        };
        let p = predict(&[0.3, 0.2], &bank, &tree, DistanceKind::SquaredEuclidean, &opts).unwrap();
        assert!(p.levels.iter().all(|l| l.decision == Decision::Unknown));
    }

    #[test]
    fn ties_pick_smaller_id() {
        let (tree, bank) = balanced();
        let p = predict(&[-3.0, -20.0], &bank, &tree, DistanceKind::SquaredEuclidean, &PredictOptions::open(3)).unwrap();
        assert_eq!(p.levels[2].decision, Decision::Class(id("a")));
    }

    #[test]
    fn consistency_snaps_ancestors() {
        let (tree, bank) = balanced();
        // Nearest leaf is `b`, but the nearest level-0 node is `y`.
        let q = [3.6, 0.0];
        let kind = DistanceKind::SquaredEuclidean;
        let free = predict(&q, &bank, &tree, kind, &PredictOptions::open(3)).unwrap();
        let mut opts = PredictOptions::open(3);
        opts.consistent = true;
        let snapped = predict(&q, &bank, &tree, kind, &opts).unwrap();
        assert_eq!(free.levels[2].decision, Decision::Class(id("b")));
        assert_eq!(free.levels[0].decision, Decision::Class(id("y")));
        assert_eq!(free.levels[2].decision, snapped.levels[2].decision);
        let leaf = snapped.levels[2].decision.class().unwrap().clone();
        assert_eq!(
            snapped.levels[0].decision,
            Decision::Class(tree.ancestor_at(&leaf, 0).unwrap().clone())
        );
    }
}

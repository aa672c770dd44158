use super::LossSpec;
use crate::classifier::LevelPosterior;
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, TaxonomyTree};

/// Weight of each level `0..=height`.
pub fn level_weights(spec: LossSpec, height: usize) -> Vec<f64> {
    match spec {
        LossSpec::Hierarchical { alpha } => (0..=height).map(|h| (alpha * h as f64).exp()).collect(),
        LossSpec::Flat => (0..=height).map(|h| if h == height { 1.0 } else { 0.0 }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Unweighted mean cross-entropy per level.
    pub level_ce: Vec<f64>,
    /// `∂loss/∂logit` indexed `[query][level][class]`, logits being negative
    /// distances.
    pub grad_logits: Vec<Vec<Vec<f64>>>,
}

/// Mean over queries of `Σ_h w_h · −log p_h(ancestor_h(truth))`.
///
/// `posteriors[q][h]` is query `q`'s level-`h` posterior. Levels with zero
/// weight contribute neither loss nor gradient.
pub fn hierarchical_loss(
    posteriors: &[Vec<LevelPosterior>],
    truths: &[ClassId],
    tree: &TaxonomyTree,
    spec: LossSpec,
) -> Result<LossOutput> {
    spec.validate()?;
    if posteriors.is_empty() || posteriors.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} posteriors for {} truths",
            posteriors.len(),
            truths.len()
        )));
    }
    let levels = tree.level_count();
    let weights = level_weights(spec, tree.height());
    let n = posteriors.len() as f64;
    let mut ce_sums = vec![0.0; levels];
    let mut grad_logits = Vec::with_capacity(posteriors.len());
    for (q, (post, truth)) in posteriors.iter().zip(truths).enumerate() {
        if post.len() != levels {
            return Err(Error::Config(format!(
                "query {q} has {} level posteriors, taxonomy has {levels} levels",
                post.len()
            )));
        }
        let lineage = tree.lineage(truth)?;
        let mut grads = Vec::with_capacity(levels);
        for (h, p) in post.iter().enumerate() {
            let mut g = vec![0.0; p.classes.len()];
            if weights[h] != 0.0 {
                let y = p
                    .classes
                    .binary_search(&lineage[h])
                    .map_err(|_| Error::UnknownClass(lineage[h].to_string()))?;
                ce_sums[h] -= p.log_probs[y];
                let scale = weights[h] / n;
                for (gk, lp) in g.iter_mut().zip(&p.log_probs) {
                    *gk = scale * lp.exp();
                }
                g[y] -= scale;
            }
            grads.push(g);
        }
        grad_logits.push(grads);
    }
    let level_ce: Vec<f64> = ce_sums.iter().map(|s| s / n).collect();
    let loss = level_ce
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(ce, w)| w * ce)
        .sum();
    Ok(LossOutput {
        loss,
        level_ce,
        grad_logits,
    })
}

use std::collections::BTreeMap;
use std::hash::Hasher;

use rayon::prelude::*;

use super::episode::Episode;
use super::loss::hierarchical_loss;
use super::LossSpec;
use crate::classifier::{distance, dot, norm, DistanceKind, LevelPosterior};
use crate::encoder::{backward_params, forward_raw, EncoderParams, GradientSet, Objective, Tape};
use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, TaxonomyTree};
use crate::Embedding;

/// Flattened episode inputs in `f64`, support first.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInputs {
    pub support: Vec<(ClassId, Vec<f64>)>,
    pub queries: Vec<(ClassId, Vec<f64>)>,
}

impl EpisodeInputs {
    pub fn from_episode(episode: &Episode) -> Self {
        let flat = |x: &crate::dsp::LogMelSpectrogram| x.data().iter().map(|&v| v as f64).collect();
        EpisodeInputs {
            support: episode.support.iter().map(|(k, x)| (k.clone(), flat(x))).collect(),
            queries: episode.queries.items.iter().map(|(x, k)| (k.clone(), flat(x))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub loss: f64,
    pub level_ce: Vec<f64>,
    /// Fraction of queries whose nearest level-`h` prototype is the truth's
    /// level-`h` ancestor.
    pub accuracy: Vec<f64>,
    pub gradient: Option<GradientSet>,
    /// Combined activation-kink fingerprint of every forward pass.
    pub kink_signature: u64,
}

/// Support indices and prototype of every class present at one level.
struct LevelGroups {
    classes: Vec<ClassId>,
    members: Vec<Vec<usize>>,
    protos: Vec<Vec<f64>>,
}

fn level_groups(tree: &TaxonomyTree, support: &[(ClassId, Vec<f64>)], embs: &[Embedding]) -> Result<Vec<LevelGroups>> {
    let lineages = support
        .iter()
        .map(|(leaf, _)| tree.lineage(leaf))
        .collect::<Result<Vec<_>>>()?;
    let dim = embs.first().map_or(0, |e| e.dim());
    (0..tree.level_count())
        .map(|h| {
            let mut groups: BTreeMap<&ClassId, Vec<usize>> = BTreeMap::new();
            for (s, lin) in lineages.iter().enumerate() {
                groups.entry(&lin[h]).or_default().push(s);
            }
            let mut out = LevelGroups {
                classes: Vec::new(),
                members: Vec::new(),
                protos: Vec::new(),
            };
            for (id, members) in groups {
                let mut c = vec![0.0; dim];
                for &s in &members {
                    c.iter_mut().zip(embs[s].iter()).for_each(|(a, v)| *a += v);
                }
                let n = members.len() as f64;
                c.iter_mut().for_each(|a| *a /= n);
                out.classes.push(id.clone());
                out.members.push(members);
                out.protos.push(c);
            }
            Ok(out)
        })
        .collect()
}

/// Embeds the episode, scores every query at every level against prototypes
/// built from the support, and evaluates the loss. With `with_gradient`, also
/// backpropagates through the posteriors, distances, prototype means and
/// encoder; an angular encoder additionally gets its scale and bias
/// gradients.
pub fn episode_forward(
    params: &EncoderParams,
    inputs: &EpisodeInputs,
    tree: &TaxonomyTree,
    loss_spec: LossSpec,
    with_gradient: bool,
) -> Result<HeadOutput> {
    if inputs.support.is_empty() || inputs.queries.is_empty() {
        return Err(Error::Episode("empty support or query set".into()));
    }
    let kind = DistanceKind::for_params(params);
    let all: Vec<&[f64]> = inputs
        .support
        .iter()
        .chain(&inputs.queries)
        .map(|(_, x)| x.as_slice())
        .collect();
    let passes: Vec<(Embedding, Tape)> = all
        .par_iter()
        .map(|x| forward_raw(params, x))
        .collect::<Result<_>>()?;
    let (embs, tapes): (Vec<Embedding>, Vec<Tape>) = passes.into_iter().unzip();
    let mut sig = std::collections::hash_map::DefaultHasher::new();
    tapes.iter().for_each(|t| sig.write_u64(t.kink_signature()));

    let ns = inputs.support.len();
    let groups = level_groups(tree, &inputs.support, &embs[..ns])?;
    let truths: Vec<ClassId> = inputs.queries.iter().map(|(k, _)| k.clone()).collect();
    let posteriors = embs[ns..]
        .iter()
        .map(|q| {
            groups
                .iter()
                .enumerate()
                .map(|(h, g)| {
                    let d = g
                        .protos
                        .iter()
                        .map(|c| distance(q, c, kind))
                        .collect::<Result<Vec<_>>>()?;
                    LevelPosterior::from_distances(h, g.classes.clone(), d)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let out = hierarchical_loss(&posteriors, &truths, tree, loss_spec)?;

    let levels = tree.level_count();
    let mut correct = vec![0usize; levels];
    for (post, truth) in posteriors.iter().zip(&truths) {
        let lineage = tree.lineage(truth)?;
        for (h, p) in post.iter().enumerate() {
            if p.classes[p.argmin_distance()] == lineage[h] {
                correct[h] += 1;
            }
        }
    }
    let accuracy = correct.iter().map(|&c| c as f64 / truths.len() as f64).collect();

    let gradient = if with_gradient {
        Some(head_backward(params, kind, &embs, &tapes, ns, &groups, &out.grad_logits)?)
    } else {
        None
    };
    Ok(HeadOutput {
        loss: out.loss,
        level_ce: out.level_ce,
        accuracy,
        gradient,
        kink_signature: sig.finish(),
    })
}

fn head_backward(
    params: &EncoderParams,
    kind: DistanceKind,
    embs: &[Embedding],
    tapes: &[Tape],
    ns: usize,
    groups: &[LevelGroups],
    grad_logits: &[Vec<Vec<f64>>],
) -> Result<GradientSet> {
    let dim = params.embedding_dim();
    let mut grad_emb = vec![vec![0.0; dim]; embs.len()];
    let mut grad_proto: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| vec![vec![0.0; dim]; g.protos.len()]).collect();
    let (mut g_scale, mut g_bias) = (0.0, 0.0);

    for (qi, per_level) in grad_logits.iter().enumerate() {
        let q = &embs[ns + qi];
        let gq = &mut grad_emb[ns + qi];
        for (h, gl) in per_level.iter().enumerate() {
            for (k, &g) in gl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                // logit = −distance
                let gd = -g;
                let c = &groups[h].protos[k];
                let gc = &mut grad_proto[h][k];
                match kind {
                    DistanceKind::SquaredEuclidean => {
                        for i in 0..dim {
                            let t = 2.0 * gd * (q[i] - c[i]);
                            gq[i] += t;
                            gc[i] -= t;
                        }
                    }
                    DistanceKind::Angular { scale, .. } => {
                        let (nq, nc) = (norm(q), norm(c));
                        let cos = dot(q, c) / (nq * nc);
                        g_scale -= gd * cos;
                        g_bias -= gd;
                        let gcos = -gd * scale;
                        for i in 0..dim {
                            gq[i] += gcos * (c[i] / (nq * nc) - cos * q[i] / (nq * nq));
                            gc[i] += gcos * (q[i] / (nq * nc) - cos * c[i] / (nc * nc));
                        }
                    }
                }
            }
        }
    }
    for (g, gp) in groups.iter().zip(&grad_proto) {
        for (members, gc) in g.members.iter().zip(gp) {
            let inv = 1.0 / members.len() as f64;
            for &s in members {
                grad_emb[s].iter_mut().zip(gc).for_each(|(a, v)| *a += v * inv);
            }
        }
    }

    let partials = tapes
        .par_iter()
        .zip(&grad_emb)
        .map(|(tape, ge)| backward_params(params, tape, ge))
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradientSet::zeros_like(params);
    partials.iter().for_each(|p| total.add_assign(p));
    if let Some(ai) = params.angular_index() {
        total.tensors[ai][0] += g_scale;
        total.tensors[ai + 1][0] += g_bias;
    }
    Ok(total)
}

/// The episode loss as a function of the encoder parameters, for gradient
/// checks.
pub struct EpisodeObjective<'a> {
    pub inputs: &'a EpisodeInputs,
    pub tree: &'a TaxonomyTree,
    pub loss: LossSpec,
}

impl Objective for EpisodeObjective<'_> {
    fn value(&self, params: &EncoderParams) -> Result<(f64, u64)> {
        let out = episode_forward(params, self.inputs, self.tree, self.loss, false)?;
        Ok((out.loss, out.kink_signature))
    }

    fn value_and_gradient(&self, params: &EncoderParams) -> Result<(f64, GradientSet)> {
        let out = episode_forward(params, self.inputs, self.tree, self.loss, true)?;
        Ok((out.loss, out.gradient.expect("requested")))
    }
}

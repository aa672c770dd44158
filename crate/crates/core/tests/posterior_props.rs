mod common;

use common::{id, random_support, random_tree, random_vec, rng};
use hiproto::classifier::{distance, level_posterior, DistanceKind, LevelPosterior};
use hiproto::protostore::{aggregate_meta, SupportSet};
use hiproto::trainer::{hierarchical_loss, LossSpec};
use hiproto::{ClassId, Embedding, TaxonomyTree};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn kinds(r: &mut ChaCha8Rng) -> [DistanceKind; 2] {
    [
        DistanceKind::SquaredEuclidean,
        DistanceKind::Angular {
            scale: r.random_range(0.1..20.0),
            bias: r.random_range(-10.0..10.0),
        },
    ]
}

/// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
fn rotation(r: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < dim {
        let mut v = random_vec(r, dim, 1.0);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn posteriors_normalise_and_agree_with_nearest_prototype() {
    let mut r = rng(31);
    for _ in 0..1000 {
        let tree = random_tree(&mut r);
        let dim = r.random_range(2..=6);
        let bank = aggregate_meta(&tree, &random_support(&mut r, &tree, dim)).unwrap();
        let q = Embedding::new(random_vec(&mut r, dim, 6.0));
        for kind in kinds(&mut r) {
            for h in 0..tree.level_count() {
                let p = level_posterior(&q, &bank, h, kind).unwrap();
                let probs = p.probabilities();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|x| (0.0..=1.0).contains(x)));
                assert_eq!(p.argmax(), p.argmin_distance());
                let brute = p
                    .distances
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, d)| if *d < p.distances[best] { i } else { best });
                assert_eq!(p.argmin_distance(), brute);
            }
        }
    }
}

#[test]
fn two_prototype_example() {
    let p = LevelPosterior::from_distances(0, vec![id("a"), id("b")], vec![0.0, 2.0]).unwrap();
    let probs = p.probabilities();
    assert!((probs[0] - 0.880797).abs() < 1e-6);
    assert!((probs[1] - 0.119203).abs() < 1e-6);
    let eq = LevelPosterior::from_distances(0, vec![id("a"), id("b")], vec![3.5, 3.5]).unwrap();
    assert_eq!(eq.probabilities(), vec![0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn shift_invariance_and_large_distances(
        ds in prop::collection::vec(0.0..1e6f64, 1..12),
        shift in -1e3..1e3f64,
    ) {
        let classes: Vec<ClassId> = (0..ds.len()).map(|i| id(&format!("c{i}"))).collect();
        let p = LevelPosterior::from_distances(0, classes.clone(), ds.clone()).unwrap();
        let probs = p.probabilities();
        prop_assert!(probs.iter().all(|x| x.is_finite()));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = ds.iter().map(|d| d + shift).collect();
        let q = LevelPosterior::from_distances(0, classes, shifted).unwrap();
        for (a, b) in probs.iter().zip(q.probabilities()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn euclidean_posterior_is_rotation_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let dim = r.random_range(2..=5);
        let support = random_support(&mut r, &tree, dim);
        let m = rotation(&mut r, dim);
        let rotated = SupportSet::new(
            support
                .classes()
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|e| Embedding::new(rotate(&m, e))).collect()))
                .collect(),
        )
        .unwrap();
        let (a, b) = (aggregate_meta(&tree, &support).unwrap(), aggregate_meta(&tree, &rotated).unwrap());
        let q = random_vec(&mut r, dim, 5.0);
        let (q1, q2) = (Embedding::new(q.clone()), Embedding::new(rotate(&m, &q)));
        for h in 0..tree.level_count() {
            let pa = level_posterior(&q1, &a, h, DistanceKind::SquaredEuclidean).unwrap().probabilities();
            let pb = level_posterior(&q2, &b, h, DistanceKind::SquaredEuclidean).unwrap().probabilities();
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn distance_examples() {
    let se = DistanceKind::SquaredEuclidean;
    assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], se).unwrap(), 25.0);
    assert_eq!(distance(&[1.5, -2.0], &[1.5, -2.0], se).unwrap(), 0.0);
    let ang = DistanceKind::Angular { scale: 1.0, bias: 0.0 };
    assert!((distance(&[0.3, 4.0], &[0.3, 4.0], ang).unwrap() + 1.0).abs() < 1e-12);
    assert!(distance(&[0.0, 0.0], &[1.0, 0.0], ang).is_err());
    assert!(distance(&[1.0], &[1.0, 0.0], se).is_err());
}

fn random_posteriors(r: &mut ChaCha8Rng, tree: &TaxonomyTree, queries: usize) -> (Vec<Vec<LevelPosterior>>, Vec<ClassId>) {
    let leaves: Vec<ClassId> = tree.leaves().cloned().collect();
    let truths: Vec<ClassId> = (0..queries).map(|_| leaves[r.random_range(0..leaves.len())].clone()).collect();
    let posts = truths
        .iter()
        .map(|_| {
            (0..tree.level_count())
                .map(|h| {
                    let classes: Vec<ClassId> = tree.nodes_at(h).cloned().collect();
                    let d = (0..classes.len()).map(|_| r.random_range(0.0..8.0)).collect();
                    LevelPosterior::from_distances(h, classes, d).unwrap()
                })
                .collect()
        })
        .collect();
    (posts, truths)
}

#[test]
fn loss_matches_direct_weighted_sum() {
    let mut r = rng(5);
    for _ in 0..200 {
        let tree = random_tree(&mut r);
        let queries = r.random_range(1..10);
        let (posts, truths) = random_posteriors(&mut r, &tree, queries);
        let n = truths.len() as f64;
        let ce: Vec<f64> = (0..tree.level_count())
            .map(|h| {
                posts
                    .iter()
                    .zip(&truths)
                    .map(|(p, t)| -p[h].prob(tree.ancestor_at(t, h).unwrap()).unwrap().ln())
                    .sum::<f64>()
                    / n
            })
            .collect();
        for alpha in [-1.0, 0.0, 1.0] {
            let out = hierarchical_loss(&posts, &truths, &tree, LossSpec::Hierarchical { alpha }).unwrap();
            let direct: f64 = ce.iter().enumerate().map(|(h, c)| (alpha * h as f64).exp() * c).sum();
            assert!((out.loss - direct).abs() < 1e-9 * direct.max(1.0), "{} vs {direct}", out.loss);
            assert!(out.level_ce.iter().all(|&c| c >= 0.0));
        }
        let flat = hierarchical_loss(&posts, &truths, &tree, LossSpec::Flat).unwrap();
        let leaf_only = hierarchical_loss(&posts, &truths, &tree, LossSpec::Hierarchical { alpha: 0.0 }).unwrap();
        assert_eq!(flat.loss, leaf_only.level_ce[tree.height()]);
        let grads_h = &flat.grad_logits;
        assert!(grads_h.iter().all(|g| g[..tree.height()].iter().all(|l| l.iter().all(|&x| x == 0.0))));
    }
}

#[test]
fn three_level_closed_form() {
    let tree = hiproto::TaxonomyTree::parse("a\tp\tx\nb\tq\ty\n").unwrap();
    let post = |h: usize, d: [f64; 2]| {
        let classes = tree.nodes_at(h).cloned().collect();
        LevelPosterior::from_distances(h, classes, d.to_vec()).unwrap()
    };
    let posts = vec![vec![post(0, [0.2, 1.0]), post(1, [0.5, 0.7]), post(2, [1.0, 0.0])]];
    let truths = vec![id("a")];
    let c: Vec<f64> = posts[0].iter().map(|p| -p.prob(&p.classes[0]).unwrap().ln()).collect();
    let out = hierarchical_loss(&posts, &truths, &tree, LossSpec::Hierarchical { alpha: 1.0 }).unwrap();
    let e = std::f64::consts::E;
    assert!((out.loss - (c[0] + e * c[1] + e * e * c[2])).abs() < 1e-12);
}

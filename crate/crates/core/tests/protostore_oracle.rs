mod common;

use std::collections::BTreeMap;

use common::{random_support, random_tree, random_vec, rng};
use hiproto::protostore::{aggregate_meta, enroll, load_bank, save_bank, PrototypeBank, SupportSet};
use hiproto::{ClassId, Embedding, TaxonomyTree};
use rand::Rng;

/// Flat mean of every support embedding whose leaf descends from `node`.
fn brute_force(tree: &TaxonomyTree, support: &SupportSet, level: usize, node: &ClassId) -> Option<(Vec<f64>, u64)> {
    let mut sum = vec![0.0; support.dim()];
    let mut n = 0u64;
    for (leaf, embs) in support.classes() {
        if tree.ancestor_at(leaf, level).unwrap() == node {
            for e in embs {
                sum.iter_mut().zip(e.iter()).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sum.iter().map(|s| s / n as f64).collect(), n))
}

fn assert_close(a: &PrototypeBank, b: &PrototypeBank, tol: f64) {
    assert_eq!(a.level_count(), b.level_count());
    for h in 0..a.level_count() {
        let (la, lb) = (a.level(h).unwrap(), b.level(h).unwrap());
        assert_eq!(la.keys().collect::<Vec<_>>(), lb.keys().collect::<Vec<_>>());
        for (id, p) in la {
            let q = &lb[id];
            assert_eq!(p.count, q.count, "count of {id}");
            for (x, y) in p.vector.iter().zip(&q.vector) {
                assert!((x - y).abs() <= tol, "{id}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn meta_prototypes_match_flat_descendant_mean() {
    let mut r = rng(2024);
    let mut unequal = 0;
    for _ in 0..100 {
        let tree = random_tree(&mut r);
        let dim = r.random_range(1..=6);
        let support = random_support(&mut r, &tree, dim);
        let counts: Vec<usize> = support.classes().values().map(|v| v.len()).collect();
        if counts.iter().any(|&c| c != counts[0]) {
            unequal += 1;
        }
        let bank = aggregate_meta(&tree, &support).unwrap();
        for h in 0..tree.level_count() {
            let level = bank.level(h).unwrap();
            let mut expected = 0;
            for node in tree.nodes_at(h) {
                match brute_force(&tree, &support, h, node) {
                    Some((mean, n)) => {
                        expected += 1;
                        let p = &level[node];
                        assert_eq!(p.count, n);
                        for (x, y) in p.vector.iter().zip(&mean) {
                            assert!((x - y).abs() <= 1e-9);
                        }
                    }
                    None => assert!(!level.contains_key(node)),
                }
            }
            assert_eq!(level.len(), expected);
        }
    }
    assert!(unequal >= 50, "only {unequal} instances had unequal class counts");
}

#[test]
fn enrollment_matches_rebuild_and_ignores_order() {
    let mut r = rng(7);
    for _ in 0..50 {
        let tree = random_tree(&mut r);
        let dim = r.random_range(1..=5);
        let support = random_support(&mut r, &tree, dim);
        let bank = aggregate_meta(&tree, &support).unwrap();
        let leaves: Vec<ClassId> = tree.leaves().cloned().collect();
        let batches: Vec<(ClassId, Vec<Embedding>)> = (0..3)
            .map(|_| {
                let leaf = leaves[r.random_range(0..leaves.len())].clone();
                let n = r.random_range(1..=4);
                (leaf, (0..n).map(|_| Embedding::new(random_vec(&mut r, dim, 5.0))).collect())
            })
            .collect();

        let mut forward = bank.clone();
        for (leaf, embs) in &batches {
            forward = enroll(&forward, &tree, leaf, embs).unwrap();
        }
        let mut backward = bank.clone();
        for (leaf, embs) in batches.iter().rev() {
            backward = enroll(&backward, &tree, leaf, embs).unwrap();
        }
        assert_close(&forward, &backward, 1e-9);

        let mut all: BTreeMap<ClassId, Vec<Embedding>> = support.classes().clone();
        for (leaf, embs) in &batches {
            all.entry(leaf.clone()).or_default().extend(embs.iter().cloned());
        }
        let rebuilt = aggregate_meta(&tree, &SupportSet::new(all).unwrap()).unwrap();
        assert_close(&forward, &rebuilt, 1e-9);
    }
}

#[test]
fn bank_files_round_trip_bitwise() {
    let mut r = rng(99);
    for _ in 0..30 {
        let tree = random_tree(&mut r);
        let support = random_support(&mut r, &tree, 4);
        let bank = aggregate_meta(&tree, &support).unwrap();
        let bytes = save_bank(&bank);
        let loaded = load_bank(&bytes, &tree).unwrap();
        assert_eq!(loaded, bank.quantized());
        assert_eq!(save_bank(&loaded), bytes);
    }
}

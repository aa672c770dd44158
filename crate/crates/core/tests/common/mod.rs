#![allow(dead_code)]

use std::collections::BTreeMap;

use hiproto::protostore::SupportSet;
use hiproto::{ClassId, Embedding, TaxonomyTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn id(s: &str) -> ClassId {
    ClassId::new(s).unwrap()
}

/// Random tree of height 1..=3 with 1..=3 children per node.
pub fn random_tree(rng: &mut ChaCha8Rng) -> TaxonomyTree {
    let height = rng.random_range(1..=3usize);
    let mut paths: Vec<Vec<String>> = (0..rng.random_range(1..=3))
        .map(|i| vec![format!("n0_{i}")])
        .collect();
    for h in 1..=height {
        let mut next = Vec::new();
        let mut counter = 0;
        for p in &paths {
            for _ in 0..rng.random_range(1..=3) {
                let mut q = p.clone();
                q.push(format!("n{h}_{counter}"));
                counter += 1;
                next.push(q);
            }
        }
        paths = next;
    }
    TaxonomyTree::from_chains(paths.into_iter().map(|p| {
        let speaker = rng.random_bool(0.3);
        (p.iter().rev().map(|s| id(s)).collect(), speaker)
    }))
    .unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Support over a random non-empty subset of leaves, 1..=6 shots each.
pub fn random_support(rng: &mut ChaCha8Rng, tree: &TaxonomyTree, dim: usize) -> SupportSet {
    let leaves: Vec<ClassId> = tree.leaves().cloned().collect();
    let mut classes = BTreeMap::new();
    for (i, leaf) in leaves.iter().enumerate() {
        if i == 0 || rng.random_bool(0.7) {
            let n = rng.random_range(1..=6);
            let embs = (0..n).map(|_| Embedding::new(random_vec(rng, dim, 5.0))).collect();
            classes.insert(leaf.clone(), embs);
        }
    }
    SupportSet::new(classes).unwrap()
}

//! Per-level prototype banks.
//!
//! Leaf prototypes are support means. A node above the leaves gets the mean
//! over every support embedding of its descendant leaves, so a leaf with
//! more support pulls its ancestors harder than a sparse sibling does.
//! Counts travel with the vectors so that enrollment can update a bank
//! without the original embeddings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::taxonomy::{ClassId, TaxonomyTree};
use crate::Embedding;

pub const BANK_MAGIC: &[u8; 4] = b"HPB1";
const WHAT: &str = "prototype bank";

/// Embedded support examples keyed by leaf class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    dim: usize,
    classes: BTreeMap<ClassId, Vec<Embedding>>,
}

impl SupportSet {
    pub fn new(classes: BTreeMap<ClassId, Vec<Embedding>>) -> Result<Self> {
        let dim = classes
            .values()
            .flatten()
            .next()
            .map(|e| e.dim())
            .ok_or_else(|| Error::Config("empty support set".into()))?;
        for (leaf, list) in &classes {
            if list.is_empty() {
                return Err(Error::Config(format!("no support for `{leaf}`")));
            }
            if let Some(e) = list.iter().find(|e| e.dim() != dim) {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: e.dim(),
                });
            }
            if list.iter().any(|e| !e.is_finite()) {
                return Err(Error::Config(format!("non-finite support for `{leaf}`")));
            }
        }
        Ok(SupportSet { dim, classes })
    }

    /// Groups `(leaf, embedding)` pairs by leaf.
    pub fn from_pairs<I: IntoIterator<Item = (ClassId, Embedding)>>(pairs: I) -> Result<Self> {
        let mut map: BTreeMap<ClassId, Vec<Embedding>> = BTreeMap::new();
        for (k, e) in pairs {
            map.entry(k).or_default().push(e);
        }
        Self::new(map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &BTreeMap<ClassId, Vec<Embedding>> {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Support embeddings behind the vector; 0 in a compact bank.
    pub count: u64,
}

/// Mean of each class's embeddings.
pub fn leaf_prototypes(support: &SupportSet) -> BTreeMap<ClassId, Prototype> {
    support
        .classes
        .iter()
        .map(|(leaf, list)| {
            let mut sum = vec![0.0; support.dim];
            for e in list {
                sum.iter_mut().zip(e.iter()).for_each(|(s, v)| *s += v);
            }
            let n = list.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            (
                leaf.clone(),
                Prototype {
                    vector: sum,
                    count: list.len() as u64,
                },
            )
        })
        .collect()
}

/// Prototypes for every level of one taxonomy, level `H` holding the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    digest: [u8; 32],
    dim: usize,
    levels: Vec<BTreeMap<ClassId, Prototype>>,
}

/// Builds the full bank: leaf means, then every ancestor as the mean over all
/// support embeddings below it.
pub fn aggregate_meta(tree: &TaxonomyTree, support: &SupportSet) -> Result<PrototypeBank> {
    for leaf in support.classes.keys() {
        if !tree.is_leaf(leaf) {
            return Err(Error::UnknownClass(leaf.to_string()));
        }
    }
    let leaves = leaf_prototypes(support);
    let mut bank = PrototypeBank {
        digest: tree.digest(),
        dim: support.dim,
        levels: vec![BTreeMap::new(); tree.level_count()],
    };
    bank.levels[tree.height()] = leaves;
    bank.rebuild_ancestors(tree);
    Ok(bank)
}

impl PrototypeBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn taxonomy_digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn level(&self, h: usize) -> Result<&BTreeMap<ClassId, Prototype>> {
        self.levels.get(h).ok_or(Error::LevelOutOfRange {
            level: h,
            height: self.levels.len().saturating_sub(1),
        })
    }

    pub fn get(&self, h: usize, id: &ClassId) -> Option<&Prototype> {
        self.levels.get(h)?.get(id)
    }

    /// True when counts were dropped, which rules out enrollment.
    pub fn is_compact(&self) -> bool {
        self.levels.iter().flat_map(|l| l.values()).any(|p| p.count == 0)
    }

    /// Copy without support counts.
    pub fn compact(&self) -> Self {
        let mut b = self.clone();
        b.levels
            .iter_mut()
            .flat_map(|l| l.values_mut())
            .for_each(|p| p.count = 0);
        b
    }

    /// Copy with every value rounded through `f32` (the stored precision).
    pub fn quantized(&self) -> Self {
        let mut b = self.clone();
        for p in b.levels.iter_mut().flat_map(|l| l.values_mut()) {
            p.vector.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        b
    }

    /// Recomputes levels `0..H` from the leaf level, summing `count·vector`
    /// of the children and dividing by the summed count.
    fn rebuild_ancestors(&mut self, tree: &TaxonomyTree) {
        let height = tree.height();
        for h in (0..height).rev() {
            let mut sums: BTreeMap<ClassId, (Vec<f64>, u64)> = BTreeMap::new();
            for (id, p) in &self.levels[h + 1] {
                let parent = tree.parent(h + 1, id).expect("bank ids come from the tree");
                let (sum, count) = sums
                    .entry(parent.clone())
                    .or_insert_with(|| (vec![0.0; self.dim], 0));
                let w = p.count as f64;
                sum.iter_mut().zip(&p.vector).for_each(|(s, v)| *s += w * v);
                *count += p.count;
            }
            self.levels[h] = sums
                .into_iter()
                .map(|(id, (mut sum, count))| {
                    let n = count as f64;
                    sum.iter_mut().for_each(|s| *s /= n);
                    (id, Prototype { vector: sum, count })
                })
                .collect();
        }
    }

    /// Checks that every entry exists at its level of `tree` and that counts
    /// add up the hierarchy. Compact banks skip the count check.
    pub fn check_against(&self, tree: &TaxonomyTree) -> Result<()> {
        if self.levels.len() != tree.level_count() {
            return Err(Error::Format(format!(
                "bank has {} levels, taxonomy has {}",
                self.levels.len(),
                tree.level_count()
            )));
        }
        for (h, level) in self.levels.iter().enumerate() {
            for (id, p) in level {
                if !tree.contains(h, id) {
                    return Err(Error::UnknownClass(id.to_string()));
                }
                if p.vector.len() != self.dim {
                    return Err(Error::Dimension {
                        expected: self.dim,
                        actual: p.vector.len(),
                    });
                }
                if h > 0 && !self.levels[h - 1].contains_key(tree.parent(h, id).expect("h > 0")) {
                    return Err(Error::Format(format!("`{id}` has no parent entry")));
                }
            }
        }
        if self.is_compact() {
            return Ok(());
        }
        for h in 0..tree.height() {
            for (id, p) in &self.levels[h] {
                let below: u64 = tree
                    .children(h, id)
                    .filter_map(|c| self.levels[h + 1].get(c))
                    .map(|c| c.count)
                    .sum();
                if below != p.count {
                    return Err(Error::Format(format!(
                        "count of `{id}` is {}, children sum to {below}",
                        p.count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Adds `embeddings` to `leaf`, returning the updated bank.
///
/// `tree` may extend the bank's taxonomy by new leaves; the result is bound
/// to `tree`.
pub fn enroll(
    bank: &PrototypeBank,
    tree: &TaxonomyTree,
    leaf: &ClassId,
    embeddings: &[Embedding],
) -> Result<PrototypeBank> {
    if !tree.is_leaf(leaf) {
        return Err(Error::UnknownClass(leaf.to_string()));
    }
    if embeddings.is_empty() {
        return Err(Error::Config("enrollment needs at least one embedding".into()));
    }
    if let Some(e) = embeddings.iter().find(|e| e.dim() != bank.dim) {
        return Err(Error::Dimension {
            expected: bank.dim,
            actual: e.dim(),
        });
    }
    if embeddings.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config("non-finite enrollment embedding".into()));
    }
    if bank.is_compact() {
        return Err(Error::Config("compact bank has no counts to enroll into".into()));
    }
    bank.check_against(tree)?;

    let mut next = bank.clone();
    next.digest = tree.digest();
    let mut add = vec![0.0; bank.dim];
    for e in embeddings {
        add.iter_mut().zip(e.iter()).for_each(|(s, v)| *s += v);
    }
    let added = embeddings.len() as u64;
    for (h, id) in tree.lineage(leaf)?.into_iter().enumerate() {
        let p = next.levels[h].entry(id).or_insert_with(|| Prototype {
            vector: vec![0.0; bank.dim],
            count: 0,
        });
        let old = p.count as f64;
        let n = (p.count + added) as f64;
        p.vector
            .iter_mut()
            .zip(&add)
            .for_each(|(v, a)| *v = (*v * old + a) / n);
        p.count += added;
    }
    Ok(next)
}

/// Serializes vectors as `f32`; load the result to get [`PrototypeBank::quantized`].
pub fn save_bank(bank: &PrototypeBank) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&bank.digest);
    out.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    out.extend_from_slice(&(bank.levels.len() as u32).to_le_bytes());
    for (h, level) in bank.levels.iter().enumerate() {
        for (id, p) in level {
            out.extend_from_slice(&(h as u32).to_le_bytes());
            out.extend_from_slice(&(id.as_str().len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_str().as_bytes());
            out.extend_from_slice(&p.count.to_le_bytes());
            for v in &p.vector {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Reads a bank saved against `tree`, refusing files bound to another taxonomy.
pub fn load_bank(bytes: &[u8], tree: &TaxonomyTree) -> Result<PrototypeBank> {
    let mut r = Reader::new(bytes, WHAT);
    let magic = r.take(4)?;
    if magic[..3] != BANK_MAGIC[..3] {
        return Err(Error::BadMagic { what: WHAT });
    }
    if magic[3] != BANK_MAGIC[3] {
        return Err(Error::BadVersion {
            what: WHAT,
            version: magic[3] as u32,
        });
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    if digest != tree.digest() {
        return Err(Error::DigestMismatch { what: WHAT });
    }
    let dim = r.u32()? as usize;
    let level_count = r.u32()? as usize;
    if dim == 0 || level_count != tree.level_count() {
        return Err(Error::Format(format!(
            "bank header: dimension {dim}, {level_count} levels"
        )));
    }
    let mut levels: Vec<BTreeMap<ClassId, Prototype>> = vec![BTreeMap::new(); level_count];
    let mut last: Option<(usize, ClassId)> = None;
    while !r.is_empty() {
        let h = r.u32()? as usize;
        if h >= level_count {
            return Err(Error::LevelOutOfRange {
                level: h,
                height: level_count - 1,
            });
        }
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("bank: class id is not UTF-8".into()))
            .and_then(ClassId::new)?;
        let count = r.u64()?;
        let vector = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("bank: non-finite prototype `{id}`")));
        }
        let key = (h, id);
        if last.as_ref().is_some_and(|prev| prev >= &key) {
            return Err(Error::Format("bank: entries out of order".into()));
        }
        levels[key.0].insert(key.1.clone(), Prototype { vector, count });
        last = Some(key);
    }
    let bank = PrototypeBank {
        digest,
        dim,
        levels,
    };
    bank.check_against(tree)?;
    Ok(bank)
}

//! The class ontology: a fixed-height tree whose leaves are the classes that
//! support and query recordings are labelled with.
//!
//! Levels run from 0 (most general) to `H` (leaves). An implicit root sits
//! above level 0 and is never stored; two leaves whose level-0 ancestors
//! differ meet only at that root, which [`TaxonomyTree::lca_depth`] reports
//! as `-1`.
//!
//! On disk a taxonomy is one leaf per line with `H + 1` tab-separated columns
//! ordered leaf first, level-0 ancestor last. A trailing `sid` column marks a
//! speaker leaf. Lines starting with `#` and blank lines are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Marker column tagging a leaf as a speaker identity.
pub const SPEAKER_TAG: &str = "sid";

/// Opaque, case-sensitive class label.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClassId(String);

impl ClassId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Taxonomy("empty class id".into()));
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::Taxonomy(format!("class id `{id}` contains whitespace")));
        }
        Ok(ClassId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ClassId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        ClassId::new(s)
    }
}

impl From<ClassId> for String {
    fn from(c: ClassId) -> String {
        c.0
    }
}

impl std::str::FromStr for ClassId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ClassId::new(s)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    /// `None` for level-0 nodes (parent is the implicit root).
    parent: Option<ClassId>,
    children: BTreeSet<ClassId>,
}

/// Immutable, validated class hierarchy of height `H >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    height: usize,
    levels: Vec<BTreeMap<ClassId, Node>>,
    speakers: BTreeSet<ClassId>,
}

impl TaxonomyTree {
    /// Builds a tree from leaf chains, each ordered leaf first, level-0 last.
    pub fn from_chains<I>(chains: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<ClassId>, bool)>,
    {
        let mut height = None;
        let mut levels: Vec<BTreeMap<ClassId, Node>> = Vec::new();
        let mut speakers = BTreeSet::new();

        for (row, (chain, is_speaker)) in chains.into_iter().enumerate() {
            if chain.len() < 2 {
                return Err(Error::Taxonomy(format!(
                    "row {}: need at least 2 columns, got {}",
                    row + 1,
                    chain.len()
                )));
            }
            let h = chain.len() - 1;
            match height {
                None => {
                    height = Some(h);
                    levels = vec![BTreeMap::new(); h + 1];
                }
                Some(expected) if expected != h => {
                    return Err(Error::Taxonomy(format!(
                        "row {}: ragged row with {} columns, expected {}",
                        row + 1,
                        h + 1,
                        expected + 1
                    )));
                }
                _ => {}
            }

            let leaf = &chain[0];
            if levels[h].contains_key(leaf) {
                return Err(Error::Taxonomy(format!("duplicate leaf `{leaf}`")));
            }
            // chain[i] sits at level h - i.
            for (i, id) in chain.iter().enumerate() {
                let level = h - i;
                let parent = chain.get(i + 1).cloned();
                let child = if i > 0 { Some(chain[i - 1].clone()) } else { None };
                let node = levels[level].entry(id.clone()).or_insert_with(|| Node {
                    parent: parent.clone(),
                    children: BTreeSet::new(),
                });
                if node.parent != parent {
                    return Err(Error::Taxonomy(format!(
                        "`{id}` at level {level} has inconsistent parents {:?} and {:?}",
                        node.parent, parent
                    )));
                }
                if let Some(child) = child {
                    node.children.insert(child);
                }
            }
            if is_speaker {
                speakers.insert(leaf.clone());
            }
        }

        let height = height.ok_or_else(|| Error::Taxonomy("empty taxonomy".into()))?;
        // An interior id repeated as a leaf of the same level cannot happen
        // because all leaves live at level H; guard against an interior node
        // at level H anyway.
        for (id, node) in &levels[height] {
            if !node.children.is_empty() {
                return Err(Error::Taxonomy(format!("leaf `{id}` has children")));
            }
        }
        Ok(TaxonomyTree {
            height,
            levels,
            speakers,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut chains = Vec::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields: Vec<&str> = line.split('\t').collect();
            let is_speaker = fields.len() > 2 && fields.last() == Some(&SPEAKER_TAG);
            if is_speaker {
                fields.pop();
            }
            let chain = fields
                .into_iter()
                .map(ClassId::new)
                .collect::<Result<Vec<_>>>()?;
            chains.push((chain, is_speaker));
        }
        Self::from_chains(chains)
    }

    /// Canonical text form: leaves sorted by id.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for leaf in self.leaves() {
            let mut cols: Vec<&str> = (0..=self.height)
                .rev()
                .map(|h| self.ancestor_ref(leaf, h).as_str())
                .collect();
            if self.is_speaker(leaf) {
                cols.push(SPEAKER_TAG);
            }
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.serialize().as_bytes()).into()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn level_count(&self) -> usize {
        self.height + 1
    }

    /// Node ids at `level`, sorted.
    pub fn nodes_at(&self, level: usize) -> impl Iterator<Item = &ClassId> {
        self.levels.get(level).into_iter().flat_map(|m| m.keys())
    }

    pub fn node_count(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, BTreeMap::len)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &ClassId> {
        self.levels[self.height].keys()
    }

    pub fn contains(&self, level: usize, id: &ClassId) -> bool {
        self.levels.get(level).is_some_and(|m| m.contains_key(id))
    }

    pub fn is_leaf(&self, id: &ClassId) -> bool {
        self.contains(self.height, id)
    }

    pub fn is_speaker(&self, leaf: &ClassId) -> bool {
        self.speakers.contains(leaf)
    }

    pub fn speaker_leaves(&self) -> impl Iterator<Item = &ClassId> {
        self.speakers.iter()
    }

    pub fn parent(&self, level: usize, id: &ClassId) -> Option<&ClassId> {
        self.levels.get(level)?.get(id)?.parent.as_ref()
    }

    pub fn children(&self, level: usize, id: &ClassId) -> impl Iterator<Item = &ClassId> {
        self.levels
            .get(level)
            .and_then(|m| m.get(id))
            .into_iter()
            .flat_map(|n| n.children.iter())
    }

    /// The unique level-`level` ancestor of `leaf`; the leaf itself at level `H`.
    pub fn ancestor_at(&self, leaf: &ClassId, level: usize) -> Result<&ClassId> {
        if !self.is_leaf(leaf) {
            return Err(Error::UnknownClass(leaf.to_string()));
        }
        if level > self.height {
            return Err(Error::LevelOutOfRange {
                level,
                height: self.height,
            });
        }
        Ok(self.ancestor_ref(leaf, level))
    }

    /// All ancestors of `leaf`, index `h` holding its level-`h` ancestor.
    pub fn lineage(&self, leaf: &ClassId) -> Result<Vec<ClassId>> {
        if !self.is_leaf(leaf) {
            return Err(Error::UnknownClass(leaf.to_string()));
        }
        let mut chain = vec![leaf.clone(); self.height + 1];
        for h in (0..self.height).rev() {
            chain[h] = self.levels[h + 1][&chain[h + 1]]
                .parent
                .clone()
                .expect("non-root node has a parent");
        }
        Ok(chain)
    }

    /// `leaf` must be a leaf of this tree.
    fn ancestor_ref(&self, leaf: &ClassId, level: usize) -> &ClassId {
        let (mut id, _) = self.levels[self.height]
            .get_key_value(leaf)
            .expect("caller checked leaf");
        for h in (level + 1..=self.height).rev() {
            id = self.levels[h][id]
                .parent
                .as_ref()
                .expect("non-root node has a parent");
        }
        id
    }

    /// Deepest level at which `a` and `b` share an ancestor; `-1` when they
    /// only meet at the implicit root.
    pub fn lca_depth(&self, a: &ClassId, b: &ClassId) -> Result<i32> {
        let la = self.lineage(a)?;
        let lb = self.lineage(b)?;
        Ok(la
            .iter()
            .zip(&lb)
            .take_while(|(x, y)| x == y)
            .count() as i32
            - 1)
    }

    /// Returns a copy with one more leaf under an existing level-`H-1` node.
    pub fn with_leaf(&self, leaf: ClassId, parent: &ClassId, is_speaker: bool) -> Result<Self> {
        if self.height == 0 || !self.contains(self.height - 1, parent) {
            return Err(Error::UnknownClass(parent.to_string()));
        }
        if self.is_leaf(&leaf) {
            return Err(Error::Taxonomy(format!("duplicate leaf `{leaf}`")));
        }
        let mut next = self.clone();
        next.levels[self.height - 1]
            .get_mut(parent)
            .expect("checked above")
            .children
            .insert(leaf.clone());
        next.levels[self.height].insert(
            leaf.clone(),
            Node {
                parent: Some(parent.clone()),
                children: BTreeSet::new(),
            },
        );
        if is_speaker {
            next.speakers.insert(leaf);
        }
        Ok(next)
    }
}

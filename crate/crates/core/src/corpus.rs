//! Recording manifests, stratified fold assignment, and a deterministic
//! synthetic corpus for desk-scale experiments.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{log_mel_frames, read_wav_file, write_wav_file, LogMelSpectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::taxonomy::{ClassId, TaxonomyTree};

/// Post-training evaluation fold.
pub const EVAL_FOLD: u8 = 9;
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub leaf: ClassId,
    pub duration: f64,
}

/// Tab-separated `path␉leaf_id␉duration` listing. Relative paths resolve
/// against `base`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Manifest(format!("duplicate path {}", e.path.display())));
            }
        }
        Ok(Manifest {
            entries,
            base: PathBuf::new(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 3 columns, got {}",
                    n + 1,
                    cols.len()
                )));
            }
            let duration: f64 = cols[2]
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad duration `{}`", n + 1, cols[2])))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(cols[0]),
                leaf: ClassId::new(cols[1])?,
                duration,
            });
        }
        Manifest::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{:.4}", e.path.display(), e.leaf, e.duration);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base.join(&entry.path)
        }
    }

    pub fn validate(&self, tree: &TaxonomyTree) -> Result<()> {
        for e in &self.entries {
            if !tree.is_leaf(&e.leaf) {
                return Err(Error::UnknownClass(e.leaf.to_string()));
            }
        }
        Ok(())
    }

    /// Entry indices grouped by leaf, in manifest order.
    pub fn by_leaf(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut map: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            map.entry(e.leaf.clone()).or_default().push(i);
        }
        map
    }

    /// Entries whose fold is in `folds`.
    pub fn subset(&self, assignment: &FoldAssignment, folds: &[u8]) -> Result<Manifest> {
        if assignment.folds.len() != self.entries.len() {
            return Err(Error::Manifest("fold assignment does not match manifest".into()));
        }
        Ok(Manifest {
            entries: self
                .entries
                .iter()
                .zip(&assignment.folds)
                .filter(|(_, f)| folds.contains(f))
                .map(|(e, _)| e.clone())
                .collect(),
            base: self.base.clone(),
        })
    }
}

/// Decoded recordings with their leaf labels, held in memory for episode
/// sampling. Whole-recording spectrograms are computed on first use.
#[derive(Debug, Clone)]
pub struct Recordings {
    items: Vec<(ClassId, Waveform)>,
    spectra: Vec<OnceLock<LogMelSpectrogram>>,
}

impl PartialEq for Recordings {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Recordings {
    pub fn new(items: Vec<(ClassId, Waveform)>) -> Self {
        let spectra = (0..items.len()).map(|_| OnceLock::new()).collect();
        Recordings { items, spectra }
    }

    /// Reads and normalises every manifest entry.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let items = manifest
            .entries
            .par_iter()
            .map(|e| Ok((e.leaf.clone(), read_wav_file(&manifest.resolve(e))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(items))
    }

    /// Log-mel frames of the whole of recording `i`.
    pub fn spectrogram(&self, i: usize) -> Result<&LogMelSpectrogram> {
        let cell = &self.spectra[i];
        if let Some(s) = cell.get() {
            return Ok(s);
        }
        let s = log_mel_frames(self.items[i].1.samples())?;
        Ok(cell.get_or_init(|| s))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn leaf(&self, i: usize) -> &ClassId {
        &self.items[i].0
    }

    pub fn waveform(&self, i: usize) -> &Waveform {
        &self.items[i].1
    }

    pub fn items(&self) -> &[(ClassId, Waveform)] {
        &self.items
    }

    /// Recording indices grouped by leaf.
    pub fn by_leaf(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut map: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, (leaf, _)) in self.items.iter().enumerate() {
            map.entry(leaf.clone()).or_default().push(i);
        }
        map
    }

    pub fn validate(&self, tree: &TaxonomyTree) -> Result<()> {
        for (leaf, _) in &self.items {
            if !tree.is_leaf(leaf) {
                return Err(Error::UnknownClass(leaf.to_string()));
            }
        }
        Ok(())
    }

    /// Only the recordings of leaves accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&ClassId) -> bool) -> Self {
        Self::new(self.items.iter().filter(|(l, _)| keep(l)).cloned().collect())
    }
}

/// Fold index per manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<u8>,
    pub fold_count: usize,
}

impl FoldAssignment {
    pub fn to_tsv(&self, manifest: &Manifest) -> String {
        let mut out = String::new();
        for (e, f) in manifest.entries.iter().zip(&self.folds) {
            let _ = writeln!(out, "{}\t{f}", e.path.display());
        }
        out
    }

    pub fn parse(text: &str, manifest: &Manifest) -> Result<Self> {
        let index: BTreeMap<&Path, usize> = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.path.as_path(), i))
            .collect();
        let mut folds = vec![None; manifest.len()];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (path, fold) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Manifest(format!("bad fold line `{line}`")))?;
            let fold: u8 = fold
                .trim()
                .parse()
                .map_err(|_| Error::Manifest(format!("bad fold `{fold}`")))?;
            let i = *index
                .get(Path::new(path))
                .ok_or_else(|| Error::Manifest(format!("{path} not in manifest")))?;
            folds[i] = Some(fold);
        }
        let folds = folds
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Manifest("fold file does not cover every entry".into()))?;
        let fold_count = folds.iter().map(|&f| f as usize + 1).max().unwrap_or(0);
        Ok(FoldAssignment { folds, fold_count })
    }
}

/// Shuffles each leaf class and deals its entries round-robin over the folds,
/// so per-class fold sizes differ by at most one.
pub fn stratified_split(manifest: &Manifest, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if manifest.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    if !(2..=256).contains(&folds) {
        return Err(Error::Config(format!("fold count {folds} outside 2..=256")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; manifest.len()];
    // Rotate the starting fold between classes to balance totals too.
    let mut start = 0usize;
    for (_, mut idx) in manifest.by_leaf() {
        idx.shuffle(&mut rng);
        for (k, i) in idx.iter().enumerate() {
            out[*i] = ((start + k) % folds) as u8;
        }
        start = (start + idx.len()) % folds;
    }
    Ok(FoldAssignment {
        folds: out,
        fold_count: folds,
    })
}

/// Shape of the synthetic tree: `top` level-0 branches, each with `mid`
/// groups of `leaves` classes. Even branches are alarm-like, odd branches
/// speech-like with speaker leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyShape {
    pub top: usize,
    pub mid: usize,
    pub leaves: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        ToyShape {
            top: 2,
            mid: 2,
            leaves: 3,
        }
    }
}

impl ToyShape {
    pub fn leaf_count(&self) -> usize {
        self.top * self.mid * self.leaves
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timbre {
    /// Gated tone chord.
    Beeper,
    /// Steady harmonic buzz without formants, pulsed.
    Buzzer,
    /// Harmonic source shaped by two formants with syllabic modulation.
    Voice,
}

/// Generator parameters for one synthetic leaf class.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClass {
    pub leaf: ClassId,
    pub lineage: Vec<ClassId>,
    pub timbre: Timbre,
    pub f0: f64,
    pub formants: [f64; 2],
    pub rate_hz: f64,
    pub speaker: bool,
}

/// Taxonomy and per-class generator settings for `shape`. Class parameters
/// depend only on the class position, never on a seed.
pub fn toy_classes(shape: ToyShape) -> Result<(TaxonomyTree, Vec<ToyClass>)> {
    if shape.top == 0 || shape.mid == 0 || shape.leaves == 0 {
        return Err(Error::Config("toy shape needs non-zero dimensions".into()));
    }
    let mut classes = Vec::new();
    for t in 0..shape.top {
        let speech = t % 2 == 1;
        let base = if speech { "speech" } else { "alarm" };
        let top = if t < 2 { base.to_string() } else { format!("{base}{}", t / 2) };
        for m in 0..shape.mid {
            let group = format!("{top}_g{m}");
            // Branch copies beyond the first pair are transposed upward.
            let shift = 1.0 + 0.09 * (t / 2) as f64;
            for l in 0..shape.leaves {
                let leaf = format!("{group}_c{l}");
                let lf = l as f64;
                let (timbre, f0, formants, rate) = if speech {
                    let low = m % 2 == 0;
                    let f0 = if low { 100.0 } else { 190.0 } * 1.09f64.powf(lf) * shift;
                    let f1 = 520.0 + 70.0 * lf + 40.0 * m as f64;
                    let f2 = 1500.0 + 170.0 * lf;
                    (Timbre::Voice, f0, [f1, f2], 3.5 + 0.2 * lf)
                } else if m % 2 == 0 {
                    let f0 = 700.0 * 1.1f64.powf(lf) * shift * (1.0 + 0.05 * (m / 2) as f64);
                    (Timbre::Beeper, f0, [0.0, 0.0], 2.0 + 0.3 * lf)
                } else {
                    let f0 = 150.0 * 1.1f64.powf(lf) * shift * (1.0 + 0.05 * (m / 2) as f64);
                    (Timbre::Buzzer, f0, [0.0, 0.0], 3.0 + 0.2 * lf)
                };
                classes.push(ToyClass {
                    leaf: ClassId::new(leaf)?,
                    lineage: vec![ClassId::new(top.clone())?, ClassId::new(group.clone())?],
                    timbre,
                    f0,
                    formants,
                    rate_hz: rate,
                    speaker: speech,
                });
            }
        }
    }
    let tree = TaxonomyTree::from_chains(classes.iter().map(|c| {
        let mut chain = vec![c.leaf.clone()];
        chain.extend(c.lineage.iter().rev().cloned());
        (chain, c.speaker)
    }))?;
    Ok((tree, classes))
}

fn formant_gain(f: f64, formants: &[f64; 2]) -> f64 {
    formants
        .iter()
        .map(|&fc| {
            let bw = 80.0 + 0.08 * fc;
            1.0 / (1.0 + ((f - fc) / bw).powi(2))
        })
        .sum::<f64>()
        + 0.05
}

/// Renders recording `index` of `class`; a pure function of its inputs.
pub fn synth_recording(class: &ToyClass, index: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let fs = SAMPLE_RATE as f64;
    let duration: f64 = rng.random_range(1.0..2.0);
    let n = (duration * fs).round() as usize;
    let f0 = class.f0 * (1.0 + rng.random_range(-0.03..0.03));
    let amp: f64 = rng.random_range(0.15..0.5);
    let env_phase: f64 = rng.random_range(0.0..1.0);
    let vib_phase: f64 = rng.random_range(0.0..TAU);
    let rate = class.rate_hz * (1.0 + rng.random_range(-0.05..0.05));

    let partials: Vec<(f64, f64)> = match class.timbre {
        Timbre::Beeper => vec![(1.0, 1.0), (1.5, 0.6), (2.0, 0.4)],
        Timbre::Buzzer => (1..)
            .map(|k| k as f64)
            .take_while(|k| k * f0 < 5000.0)
            .map(|k| (k, 1.0 / k.sqrt()))
            .collect(),
        Timbre::Voice => (1..)
            .map(|k| k as f64)
            .take_while(|k| k * f0 < 4000.0)
            .map(|k| (k, formant_gain(k * f0, &class.formants) / k.sqrt()))
            .collect(),
    };
    let mut phases: Vec<f64> = partials.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    let norm: f64 = partials.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let cycle = (t * rate + env_phase).fract();
        let (env, pitch) = match class.timbre {
            Timbre::Beeper => (smooth_gate(cycle, 0.5, 0.02), 1.0),
            Timbre::Buzzer => (smooth_gate(cycle, 0.7, 0.03), 1.0),
            Timbre::Voice => (
                0.25 + 0.75 * (std::f64::consts::PI * cycle).sin().powi(2),
                1.0 + 0.04 * (TAU * 0.7 * t + vib_phase).sin(),
            ),
        };
        let mut s = 0.0;
        for ((k, a), ph) in partials.iter().zip(phases.iter_mut()) {
            s += a * ph.sin();
            *ph += TAU * k * f0 * pitch / fs;
            if *ph > TAU {
                *ph -= TAU;
            }
        }
        let floor: f64 = rng.random_range(-1.0..1.0) * 0.003;
        out.push((amp * env * s / norm + floor) as f32);
    }
    Waveform::new(out).expect("synthesis is finite")
}

/// Rectangular gate with raised-cosine edges over one period in `[0, 1)`.
fn smooth_gate(x: f64, duty: f64, edge: f64) -> f64 {
    if x >= duty {
        0.0
    } else if x < edge {
        0.5 - 0.5 * (std::f64::consts::PI * x / edge).cos()
    } else if x > duty - edge {
        0.5 - 0.5 * (std::f64::consts::PI * (duty - x) / edge).cos()
    } else {
        1.0
    }
}

/// In-memory synthetic corpus: waveforms grouped with their leaf labels.
pub fn synth_waveforms(
    shape: ToyShape,
    per_class: usize,
    seed: u64,
) -> Result<(TaxonomyTree, Vec<(ClassId, Waveform)>)> {
    let (tree, classes) = toy_classes(shape)?;
    let items = classes
        .par_iter()
        .enumerate()
        .map(|(ci, class)| {
            let class_seed = derive_seed(seed, ci as u64);
            (0..per_class)
                .map(|i| (class.leaf.clone(), synth_recording(class, i, class_seed)))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok((tree, items))
}

/// Writes `audio/<leaf>/<leaf>_NNN.wav`, `manifest.tsv` and `taxonomy.tsv`
/// under `out_dir`.
pub fn synth_generate(
    shape: ToyShape,
    per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(TaxonomyTree, Manifest)> {
    let (tree, items) = synth_waveforms(shape, per_class, seed)?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, (leaf, wave)) in items.iter().enumerate() {
        let rel = PathBuf::from("audio")
            .join(leaf.as_str())
            .join(format!("{leaf}_{:03}.wav", i % per_class));
        let abs = out_dir.join(&rel);
        let dir = abs.parent().expect("has parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav_file(&abs, wave)?;
        entries.push(ManifestEntry {
            path: rel,
            leaf: leaf.clone(),
            duration: wave.duration_secs(),
        });
    }
    let mut manifest = Manifest::new(entries)?;
    manifest.base = out_dir.to_path_buf();
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("manifest.tsv", manifest.to_tsv())?;
    write("taxonomy.tsv", tree.serialize())?;
    Ok((tree, manifest))
}

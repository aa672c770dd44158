//! The embedding network: strided 3×3 convolution blocks with per-channel
//! scale/offset and a leaky rectifier, global average pooling, and a linear
//! projection to the embedding.
//!
//! All arithmetic runs in `f64` so that central finite differences can verify
//! the hand-written backward pass; weight files store `f32`.

mod gradcheck;
mod io;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{N_FRAMES, N_MELS};
use crate::error::{Error, Result};

pub use gradcheck::{gradcheck, GradcheckReport, Objective};
pub use io::{load_checkpoint, load_weights, save_checkpoint, save_weights, WEIGHT_MAGIC};
pub use net::forward_raw;
pub use net::{backward, forward, Tape};
pub(crate) use net::backward_params;

/// Initial angular-distance scale and bias.
pub const ANGULAR_INIT: (f64, f64) = (10.0, -5.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    /// No nonlinearity; makes the network affine (used by tests).
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z < 0.0 => slope * z,
            _ => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z < 0.0 => slope,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each stride-2 conv block.
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    /// Carry a learnable scale and bias for the angular distance.
    pub angular: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_height: N_MELS,
            input_width: N_FRAMES,
            widths: vec![8, 16, 32, 64],
            embedding_dim: 64,
            activation: Activation::LeakyRelu(0.01),
            angular: false,
        }
    }
}

impl EncoderConfig {
    /// Small network used for gradient checks.
    pub fn test_config() -> Self {
        EncoderConfig {
            widths: vec![4, 4, 4, 4],
            embedding_dim: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty block".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding dimension must be at least 2".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("empty input shape".into()));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() {
                return Err(Error::Config("non-finite leak slope".into()));
            }
        }
        Ok(())
    }

    /// Spatial size after each block, starting with the input.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.input_height, self.input_width)];
        for _ in &self.widths {
            let (h, w) = *sizes.last().expect("non-empty");
            sizes.push(((h - 1) / 2 + 1, (w - 1) / 2 + 1));
        }
        sizes
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, &c) in self.widths.iter().enumerate() {
            out.push((format!("block{i}.kernel"), vec![c, c_in, 3, 3]));
            out.push((format!("block{i}.scale"), vec![c]));
            out.push((format!("block{i}.offset"), vec![c]));
            c_in = c;
        }
        out.push(("proj.weight".into(), vec![self.embedding_dim, c_in]));
        out.push(("proj.bias".into(), vec![self.embedding_dim]));
        if self.angular {
            out.push(("angular.scale".into(), vec![1]));
            out.push(("angular.bias".into(), vec![1]));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable parameters, in [`EncoderConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    pub tensors: Vec<Tensor>,
}

/// Size and cost summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Description {
    pub parameters: usize,
    pub multiply_accumulates: usize,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Fan-in scaled uniform initialisation.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut p.tensors {
            let kind = t.name.rsplit('.').next().unwrap_or("");
            match kind {
                "kernel" | "weight" => {
                    let fan_in: usize = t.shape[1..].iter().product();
                    let gain = if kind == "kernel" { 6.0 } else { 3.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                "scale" if t.name.starts_with("block") => t.data.fill(1.0),
                "scale" => t.data.fill(ANGULAR_INIT.0),
                "bias" if t.name.starts_with("angular") => t.data.fill(ANGULAR_INIT.1),
                _ => {}
            }
        }
        Ok(p)
    }

    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor `{}` does not match layout", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("tensor `{}` has non-finite values", t.name)));
            }
        }
        Ok(EncoderParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn describe(&self) -> Description {
        let sizes = self.config.spatial_sizes();
        let mut macs = 0;
        let mut c_in = 1;
        for (i, &c) in self.config.widths.iter().enumerate() {
            let (h, w) = sizes[i + 1];
            macs += c * c_in * 9 * h * w;
            c_in = c;
        }
        macs += self.config.embedding_dim * c_in;
        Description {
            parameters: self.parameter_count(),
            multiply_accumulates: macs,
        }
    }

    /// `(scale, bias)` of the angular distance, when configured.
    pub fn angular(&self) -> Option<(f64, f64)> {
        if !self.config.angular {
            return None;
        }
        let n = self.tensors.len();
        Some((self.tensors[n - 2].data[0], self.tensors[n - 1].data[0]))
    }

    /// Index of the first angular tensor.
    pub(crate) fn angular_index(&self) -> Option<usize> {
        self.config.angular.then(|| self.tensors.len() - 2)
    }

    /// Copy with every value rounded through `f32` (the stored precision).
    pub fn quantized(&self) -> Self {
        let mut p = self.clone();
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        p
    }

    /// Flat view of scalar `index` across all tensors.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradient tensors shape-matched to an [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientSet {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scalar(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("gradient index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_small() {
        let p = EncoderParams::init(&EncoderConfig::default(), 0).unwrap();
        let d = p.describe();
        assert!(d.parameters < 100_000, "{}", d.parameters);
        assert_eq!(EncoderConfig::default().spatial_sizes().last(), Some(&(4, 7)));
    }

    #[test]
    fn init_is_deterministic() {
        let c = EncoderConfig::default();
        assert_eq!(EncoderParams::init(&c, 5).unwrap(), EncoderParams::init(&c, 5).unwrap());
        assert_ne!(EncoderParams::init(&c, 5).unwrap(), EncoderParams::init(&c, 6).unwrap());
    }

    #[test]
    fn bad_configs() {
        let mut c = EncoderConfig::default();
        c.embedding_dim = 1;
        assert!(EncoderParams::init(&c, 0).is_err());
        let mut c = EncoderConfig::default();
        c.widths = vec![];
        assert!(c.validate().is_err());
        c.widths = vec![4, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn angular_params() {
        let c = EncoderConfig {
            angular: true,
            ..EncoderConfig::test_config()
        };
        let p = EncoderParams::init(&c, 1).unwrap();
        assert_eq!(p.angular(), Some(ANGULAR_INIT));
        assert_eq!(
            p.parameter_count(),
            EncoderParams::init(&EncoderConfig::test_config(), 1).unwrap().parameter_count() + 2
        );
    }

    #[test]
    fn layout_mismatch_rejected() {
        let c = EncoderConfig::test_config();
        let mut t = EncoderParams::init(&c, 1).unwrap().tensors;
        t.pop();
        assert!(EncoderParams::from_tensors(&c, t).is_err());
    }
}

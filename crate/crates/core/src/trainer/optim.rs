use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::head::{episode_forward, EpisodeInputs};
use super::LossSpec;
use crate::encoder::{EncoderParams, GradientSet};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::taxonomy::TaxonomyTree;

const OPT_MAGIC: &[u8; 4] = b"HPO1";
const WHAT: &str = "optimizer state";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the `λ·θ` term added to every gradient.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.l2 >= 0.0
            && [self.learning_rate, self.epsilon, self.l2].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Ok(OptState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    fn check(&self, params: &EncoderParams) -> Result<()> {
        let same = self.m.len() == params.tensors.len()
            && self.m.iter().zip(&params.tensors).all(|(m, t)| m.len() == t.data.len());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("optimizer state does not match parameters".into()))
        }
    }

    /// One Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut EncoderParams, grads: &GradientSet) -> Result<()> {
        self.check(params)?;
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        for (((t, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..t.data.len() {
                let gi = g[i] + c.l2 * t.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }

    /// Checkpoint trailer; moments are kept at full precision.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        let c = self.config;
        for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon, c.l2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], params: &EncoderParams) -> Result<Self> {
        let mut r = Reader::new(bytes, WHAT);
        if r.take(4)? != OPT_MAGIC {
            return Err(Error::BadMagic { what: WHAT });
        }
        let step = r.u64()?;
        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            l2: r.f64()?,
        };
        config.validate()?;
        let count = r.u32()? as usize;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let mut read = || (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>();
            m.push(read()?);
            v.push(read()?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{WHAT}: trailing bytes")));
        }
        let state = OptState { config, step, m, v };
        state.check(params)?;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub level_ce: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Forward, backward and one optimizer update on `episode`.
pub fn train_step(
    params: &EncoderParams,
    opt: &OptState,
    episode: &Episode,
    tree: &TaxonomyTree,
    loss: LossSpec,
) -> Result<(EncoderParams, OptState, StepMetrics)> {
    if episode.plan.classes.len() < 2 {
        return Err(Error::Episode("an episode needs at least 2 classes".into()));
    }
    let inputs = EpisodeInputs::from_episode(episode);
    let out = episode_forward(params, &inputs, tree, loss, true)?;
    let grads = out.gradient.expect("requested");
    if !out.loss.is_finite() || grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            seed: episode.plan.seed,
        });
    }
    let mut next = params.clone();
    let mut next_opt = opt.clone();
    next_opt.apply(&mut next, &grads)?;
    Ok((
        next,
        next_opt,
        StepMetrics {
            loss: out.loss,
            level_ce: out.level_ce,
            accuracy: out.accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn params() -> EncoderParams {
        EncoderParams::init(&EncoderConfig::test_config(), 2).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamConfig {
            l2: 0.0,
            ..Default::default()
        };
        let mut opt = OptState::new(&p, cfg).unwrap();
        let mut g = GradientSet::zeros_like(&p);
        g.tensors[0][0] = 3.0;
        g.tensors[0][1] = -0.5;
        opt.apply(&mut p, &g).unwrap();
        let d0 = p.tensors[0].data[0] - before.tensors[0].data[0];
        let d1 = p.tensors[0].data[1] - before.tensors[0].data[1];
        assert!((d0 + 1e-3).abs() < 1e-9, "{d0}");
        assert!((d1 - 1e-3).abs() < 1e-9, "{d1}");
        assert_eq!(p.tensors[1], before.tensors[1]);
    }

    #[test]
    fn l2_shrinks_weights() {
        let mut p = params();
        let w = p.tensors[0].data[0];
        let mut opt = OptState::new(&p, AdamConfig::default()).unwrap();
        let g = GradientSet::zeros_like(&p);
        opt.apply(&mut p, &g).unwrap();
        assert!(p.tensors[0].data[0].abs() < w.abs());
    }

    #[test]
    fn trailer_round_trip() {
        let mut p = params();
        let mut opt = OptState::new(&p, AdamConfig::default()).unwrap();
        let mut g = GradientSet::zeros_like(&p);
        g.tensors[2][1] = 0.25;
        opt.apply(&mut p, &g).unwrap();
        let bytes = opt.to_bytes();
        assert_eq!(OptState::from_bytes(&bytes, &p).unwrap(), opt);
        assert!(OptState::from_bytes(&bytes[..bytes.len() - 1], &p).is_err());
        let other = EncoderParams::init(&EncoderConfig::default(), 2).unwrap();
        assert!(OptState::from_bytes(&bytes, &other).is_err());
    }
}

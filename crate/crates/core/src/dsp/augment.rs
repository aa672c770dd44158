use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Random ranges for the two augmentation transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub snr_db: (f64, f64),
    /// Reverb decay time (T60) in seconds.
    pub decay_s: (f64, f64),
    /// Wet fraction of the reverb output.
    pub wet: (f64, f64),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            snr_db: (10.0, 20.0),
            decay_s: (0.2, 1.0),
            wet: (0.0, 0.5),
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.snr_db) {
            return Err(Error::Config(format!("bad SNR range {:?}", self.snr_db)));
        }
        if !ordered(self.decay_s) || self.decay_s.0 <= 0.0 {
            return Err(Error::Config(format!("bad decay range {:?}", self.decay_s)));
        }
        if !ordered(self.wet) || self.wet.0 < 0.0 || self.wet.1 > 1.0 {
            return Err(Error::Config(format!("bad wet range {:?}", self.wet)));
        }
        Ok(())
    }

    fn draw_reverb(&self, rng: &mut impl Rng) -> ReverbParams {
        ReverbParams {
            decay_s: draw(rng, self.decay_s),
            wet: draw(rng, self.wet),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverbParams {
    pub decay_s: f64,
    pub wet: f64,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Noise gain that places `noise` at `snr_db` below `signal`.
pub fn noise_gain(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Config(format!("invalid SNR {snr_db}")));
    }
    let pn = noise.rms();
    if pn <= 0.0 {
        return Err(Error::Audio("zero-power noise".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    Ok(signal.rms() / pn * 10f64.powf(-snr_db / 20.0))
}

/// `signal + g·noise` at the requested SNR, peak-normalised if it clips.
pub fn mix_noise(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if signal.len() != noise.len() {
        return Err(Error::WrongLength {
            expected: signal.len(),
            actual: noise.len(),
        });
    }
    let g = noise_gain(signal, noise, snr_db)?;
    let mut out: Vec<f32> = signal
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&s, &n)| (s as f64 + g * n as f64) as f32)
        .collect();
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    Waveform::new(out)
}

/// Synthetic ambient bed: low-passed white noise with a random tilt and a
/// slow level drift, scaled to unit RMS.
pub fn ambient_noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pole: f64 = rng.random_range(0.0..0.98);
    let white_mix: f64 = rng.random_range(0.05..0.6);
    let drift_hz: f64 = rng.random_range(0.1..1.5);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut lp = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            lp = pole * lp + (1.0 - pole) * w;
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 1.0 + 0.3 * (std::f64::consts::TAU * drift_hz * t + phase).sin();
            env * (white_mix * w + (1.0 - white_mix) * lp * 4.0)
        })
        .collect();
    let r = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    Waveform {
        samples: out.into_iter().map(|v| v as f32).collect(),
    }
}

/// Effective impulse response `(1 - wet)·δ + wet·h`, where `h` is unit-energy
/// noise under a 60 dB-per-`decay_s` exponential envelope.
pub fn reverb_impulse_response(params: ReverbParams, seed: u64) -> Vec<f32> {
    let len = ((params.decay_s * SAMPLE_RATE as f64).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = (1000f64).ln() / (params.decay_s * SAMPLE_RATE as f64);
    let mut h: Vec<f64> = (0..len)
        .map(|n| rng.random_range(-1.0..1.0) * (-rate * n as f64).exp())
        .collect();
    let energy = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if energy > 0.0 {
        h.iter_mut().for_each(|v| *v /= energy);
    }
    let mut ir: Vec<f32> = h.iter().map(|v| (params.wet * v) as f32).collect();
    ir[0] += (1.0 - params.wet) as f32;
    ir
}

fn fft_convolve(x: &[f32], h: &[f32], out_len: usize) -> Vec<f32> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f32>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f32]| {
        let mut v: Vec<Complex32> = s.iter().map(|&r| Complex32::new(r, 0.0)).collect();
        v.resize(n, Complex32::new(0.0, 0.0));
        v
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f32;
    a.iter().take(out_len).map(|c| c.re * scale).collect()
}

/// Convolves with a synthetic decaying-noise room response; output keeps the
/// input length.
pub fn apply_reverb(w: &Waveform, spec: &AugmentationSpec, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    if w.is_empty() {
        return Ok(w.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec.draw_reverb(&mut rng);
    if params.wet == 0.0 {
        return Ok(w.clone());
    }
    let ir = reverb_impulse_response(params, derive_seed(seed, 1));
    let mut out = fft_convolve(w.samples(), &ir, w.len());
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Waveform::new(out)
}

/// Noise mixing at a random SNR followed by random reverb.
pub fn augment(w: &Waveform, spec: &AugmentationSpec, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr = draw(&mut rng, spec.snr_db);
    let noise = ambient_noise(w.len(), derive_seed(seed, 11));
    let mixed = mix_noise(w, &noise, snr)?;
    apply_reverb(&mixed, spec, derive_seed(seed, 12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::rms;
    use proptest::prelude::{prop_assert, proptest};

    fn wave(seed: u64, len: usize, amp: f32) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
    }

    #[test]
    fn equal_signal_and_noise_at_zero_db_doubles() {
        let s = wave(1, 1000, 0.2);
        let out = mix_noise(&s, &s, 0.0).unwrap();
        for (o, x) in out.samples().iter().zip(s.samples()) {
            assert!((o - 2.0 * x).abs() < 1e-6);
        }
    }

    #[test]
    fn high_snr_is_nearly_transparent() {
        let s = wave(2, 4000, 0.5);
        let n = wave(3, 4000, 0.5);
        let out = mix_noise(&s, &n, 60.0).unwrap();
        let err: Vec<f32> = out
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(a, b)| a - b)
            .collect();
        let ratio_db = 20.0 * (rms(&err) / s.rms()).log10();
        assert!(ratio_db < -59.0, "{ratio_db}");
        assert_eq!(mix_noise(&s, &n, f64::INFINITY).unwrap(), s);
    }

    #[test]
    fn zero_noise_and_length_mismatch() {
        let s = wave(4, 100, 0.5);
        let z = Waveform::new(vec![0.0; 100]).unwrap();
        assert!(mix_noise(&s, &z, 10.0).is_err());
        assert!(mix_noise(&s, &wave(5, 99, 0.5), 10.0).is_err());
    }

    #[test]
    fn peak_normalises_on_clip() {
        let s = Waveform::new(vec![0.9; 100]).unwrap();
        let out = mix_noise(&s, &s, 0.0).unwrap();
        assert!(out.samples().iter().all(|v| (*v - 1.0).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn requested_snr_is_met(seed in 0u64..1000, snr in -10.0f64..40.0) {
            let s = wave(seed, 2000, 0.3);
            let n = wave(seed + 7, 2000, 0.8);
            let g = noise_gain(&s, &n, snr).unwrap();
            let measured = 10.0 * (s.rms().powi(2) / (g * g * n.rms().powi(2))).log10();
            prop_assert!((measured - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn dry_reverb_is_identity() {
        let s = wave(6, 5000, 0.5);
        let spec = AugmentationSpec {
            wet: (0.0, 0.0),
            ..Default::default()
        };
        assert_eq!(apply_reverb(&s, &spec, 3).unwrap(), s);
    }

    #[test]
    fn impulse_yields_impulse_response() {
        let mut x = vec![0.0f32; 20_000];
        x[0] = 1.0;
        let w = Waveform::new(x).unwrap();
        let spec = AugmentationSpec {
            decay_s: (0.5, 0.5),
            wet: (0.3, 0.3),
            ..Default::default()
        };
        let out = apply_reverb(&w, &spec, 42).unwrap();
        let ir = reverb_impulse_response(
            ReverbParams {
                decay_s: 0.5,
                wet: 0.3,
            },
            derive_seed(42, 1),
        );
        assert_eq!(ir.len(), 8000);
        for (i, o) in out.samples().iter().enumerate() {
            let e = ir.get(i).copied().unwrap_or(0.0);
            assert!((o - e).abs() < 1e-5, "sample {i}: {o} vs {e}");
        }
    }

    #[test]
    fn reverb_is_deterministic_and_length_preserving() {
        let s = wave(8, 16_000, 0.5);
        let spec = AugmentationSpec::default();
        let a = apply_reverb(&s, &spec, 5).unwrap();
        assert_eq!(a.len(), s.len());
        assert_eq!(a, apply_reverb(&s, &spec, 5).unwrap());
        assert_eq!(augment(&s, &spec, 5).unwrap(), augment(&s, &spec, 5).unwrap());
    }

    #[test]
    fn invalid_spec() {
        let bad = AugmentationSpec {
            snr_db: (20.0, 10.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationSpec {
            decay_s: (0.0, 1.0),
            ..Default::default()
        };
        assert!(apply_reverb(&wave(1, 10, 0.1), &bad, 0).is_err());
    }
}

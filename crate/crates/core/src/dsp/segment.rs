use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rms, Waveform, HOP, SEGMENT_LEN};
use crate::error::{Error, Result};

/// Segments at or below this level count as silent.
pub const SILENCE_GATE_DBFS: f64 = -50.0;
const MAX_DRAWS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub waveform: Waveform,
    pub offset: usize,
    /// True when no draw cleared the silence gate.
    pub below_gate: bool,
}

fn gate_rms() -> f64 {
    10f64.powf(SILENCE_GATE_DBFS / 20.0)
}

/// Draws random one-second windows until one clears the silence gate,
/// falling back to the loudest of [`MAX_DRAWS`] candidates. Offsets lie on
/// the `HOP` grid, so a segment's spectrogram is a slice of the whole
/// recording's.
pub fn sample_segment(w: &Waveform, seed: u64) -> Result<Segment> {
    let x = w.samples();
    if x.len() < SEGMENT_LEN {
        return Err(Error::WrongLength {
            expected: SEGMENT_LEN,
            actual: x.len(),
        });
    }
    let max_step = (x.len() - SEGMENT_LEN) / HOP;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = gate_rms();
    let mut best = (0usize, f64::NEG_INFINITY);
    for _ in 0..MAX_DRAWS {
        let offset = HOP * rng.random_range(0..=max_step);
        let level = rms(&x[offset..offset + SEGMENT_LEN]);
        if level > best.1 {
            best = (offset, level);
        }
        if level > gate || max_step == 0 {
            break;
        }
    }
    let (offset, level) = best;
    Ok(Segment {
        waveform: Waveform::new(x[offset..offset + SEGMENT_LEN].to_vec())?,
        offset,
        below_gate: level <= gate,
    })
}

/// The loudest one-second window on the `HOP` grid; the earliest wins ties.
/// Deterministic, for inference where no seed is wanted.
pub fn loudest_segment(w: &Waveform) -> Result<Segment> {
    let x = w.samples();
    if x.len() < SEGMENT_LEN {
        return Err(Error::WrongLength {
            expected: SEGMENT_LEN,
            actual: x.len(),
        });
    }
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0f64);
    for &v in x {
        prefix.push(prefix.last().unwrap() + (v as f64) * (v as f64));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for offset in (0..=x.len() - SEGMENT_LEN).step_by(HOP) {
        let energy = prefix[offset + SEGMENT_LEN] - prefix[offset];
        if energy > best.1 {
            best = (offset, energy);
        }
    }
    let offset = best.0;
    let waveform = Waveform::new(x[offset..offset + SEGMENT_LEN].to_vec())?;
    let below_gate = waveform.rms() <= gate_rms();
    Ok(Segment {
        waveform,
        offset,
        below_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loudest_window_finds_burst() {
        let mut x = vec![0.001f32; 4 * SEGMENT_LEN];
        for v in &mut x[30_000..34_000] {
            *v = 0.8;
        }
        let s = loudest_segment(&Waveform::new(x.clone()).unwrap()).unwrap();
        let brute = (0..=x.len() - SEGMENT_LEN)
            .step_by(HOP)
            .max_by(|&a, &b| {
                rms(&x[a..a + SEGMENT_LEN])
                    .total_cmp(&rms(&x[b..b + SEGMENT_LEN]))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(s.offset, brute);
        assert!(s.offset <= 30_000 && s.offset + SEGMENT_LEN >= 34_000);
        assert!(!s.below_gate);
    }

    #[test]
    fn exact_length_returns_whole_input() {
        let x: Vec<f32> = (0..SEGMENT_LEN).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        let w = Waveform::new(x).unwrap();
        let s = sample_segment(&w, 3).unwrap();
        assert_eq!(s.offset, 0);
        assert_eq!(s.waveform, w);
        assert!(!s.below_gate);
    }

    #[test]
    fn silent_file_is_flagged() {
        let w = Waveform::new(vec![0.0; 3 * SEGMENT_LEN]).unwrap();
        let s = sample_segment(&w, 1).unwrap();
        assert!(s.below_gate);
        assert_eq!(s.waveform.len(), SEGMENT_LEN);
    }

    #[test]
    fn too_short() {
        let w = Waveform::new(vec![0.1; SEGMENT_LEN - 1]).unwrap();
        assert!(matches!(
            sample_segment(&w, 0),
            Err(Error::WrongLength { .. })
        ));
    }

    #[test]
    fn selected_window_overlaps_burst() {
        // 3 s of silence with a 0.3 s burst starting at 1.7 s.
        let mut x = vec![0.0f32; 3 * SEGMENT_LEN];
        let (start, end) = (27_200, 32_000);
        for (i, v) in x[start..end].iter_mut().enumerate() {
            *v = ((i as f32) * 0.3).sin() * 0.5;
        }
        // Brute-force max-RMS window as the oracle.
        let best = (0..=x.len() - SEGMENT_LEN)
            .step_by(160)
            .max_by(|&a, &b| {
                rms(&x[a..a + SEGMENT_LEN])
                    .partial_cmp(&rms(&x[b..b + SEGMENT_LEN]))
                    .unwrap()
            })
            .unwrap();
        assert!(best < end && best + SEGMENT_LEN > start);
        let w = Waveform::new(x).unwrap();
        for seed in 0..20 {
            let s = sample_segment(&w, seed).unwrap();
            assert!(!s.below_gate);
            assert!(s.offset < end && s.offset + SEGMENT_LEN > start, "seed {seed}");
        }
    }

    #[test]
    fn offsets_on_hop_grid_match_full_spectrogram() {
        let x: Vec<f32> = (0..27_123).map(|i| ((i as f32) * 0.013).sin() * 0.2).collect();
        let w = Waveform::new(x).unwrap();
        let full = crate::dsp::log_mel_frames(w.samples()).unwrap();
        for seed in 0..5 {
            let s = sample_segment(&w, seed).unwrap();
            assert_eq!(s.offset % HOP, 0);
            let direct = crate::dsp::log_mel(&s.waveform).unwrap();
            assert_eq!(full.frames(s.offset / HOP, crate::dsp::N_FRAMES).unwrap(), direct);
        }
    }

    #[test]
    fn deterministic() {
        let x: Vec<f32> = (0..40_000).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect();
        let w = Waveform::new(x).unwrap();
        assert_eq!(sample_segment(&w, 9).unwrap(), sample_segment(&w, 9).unwrap());
    }
}

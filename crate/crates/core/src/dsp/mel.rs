use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{Waveform, HOP, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE, SEGMENT_LEN};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Row-major `n_mels × n_frames` matrix of natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn from_raw(n_mels: usize, n_frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(Error::Shape(format!(
                "{} values for a {n_mels}×{n_frames} spectrogram",
                data.len()
            )));
        }
        Ok(LogMelSpectrogram {
            n_mels,
            n_frames,
            data,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frames `start..start + count` as a new spectrogram.
    pub fn frames(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.n_frames {
            return Err(Error::Shape(format!(
                "frames {start}..{} of {}",
                start + count,
                self.n_frames
            )));
        }
        let data = self
            .data
            .chunks(self.n_frames)
            .flat_map(|row| &row[start..start + count])
            .copied()
            .collect();
        LogMelSpectrogram::from_raw(self.n_mels, count, data)
    }

    /// Time-averaged log energy per mel bin.
    pub fn mean_over_frames(&self) -> Vec<f64> {
        self.data
            .chunks(self.n_frames)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / self.n_frames as f64)
            .collect()
    }
}

struct Filter {
    start: usize,
    weights: Vec<f64>,
}

/// Precomputed STFT plan, window and triangular filterbank.
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Vec<Filter>,
    centers_hz: Vec<f64>,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        // Periodic Hann.
        let window = (0..N_FFT)
            .map(|n| {
                let p = 2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64;
                (0.5 - 0.5 * p.cos()) as f32
            })
            .collect();

        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let n_bins = N_FFT / 2 + 1;
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weight = |k: usize| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                };
                let start = (0..n_bins).find(|&k| weight(k) > 0.0).unwrap_or(0);
                let end = (start..n_bins).take_while(|&k| weight(k) > 0.0).last().unwrap_or(start);
                Filter {
                    start,
                    weights: (start..=end).map(weight).collect(),
                }
            })
            .collect();
        LogMelExtractor {
            fft,
            window,
            filters,
            centers_hz: edges[1..=N_MELS].to_vec(),
        }
    }

    /// Centre frequency of every mel filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn extract(&self, w: &Waveform) -> Result<LogMelSpectrogram> {
        if w.len() != SEGMENT_LEN {
            return Err(Error::WrongLength {
                expected: SEGMENT_LEN,
                actual: w.len(),
            });
        }
        self.extract_frames(w.samples())
    }

    /// Every full frame of `x`, frame `t` starting at sample `t·HOP`. A
    /// one-second window starting at `j·HOP` yields exactly frames
    /// `j..j + N_FRAMES` of this.
    pub fn extract_frames(&self, x: &[f32]) -> Result<LogMelSpectrogram> {
        if x.len() < N_FFT {
            return Err(Error::WrongLength {
                expected: N_FFT,
                actual: x.len(),
            });
        }
        let n_frames = (x.len() - N_FFT) / HOP + 1;
        let mut data = vec![0f32; N_MELS * n_frames];
        let mut buf = vec![Complex32::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0f64; N_FFT / 2 + 1];
        for t in 0..n_frames {
            let frame = &x[t * HOP..t * HOP + N_FFT];
            for ((b, &s), &win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex32::new(s * win, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr() as f64;
            }
            for (m, f) in self.filters.iter().enumerate() {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&power[f.start..])
                    .map(|(w, p)| w * p)
                    .sum();
                data[m * n_frames + t] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        LogMelSpectrogram::from_raw(N_MELS, n_frames, data)
    }
}

fn extractor() -> &'static LogMelExtractor {
    static EXTRACTOR: OnceLock<LogMelExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(LogMelExtractor::new)
}

/// Log-mel frames of a recording of any length (at least one FFT window).
pub fn log_mel_frames(x: &[f32]) -> Result<LogMelSpectrogram> {
    extractor().extract_frames(x)
}

/// 64-bin log-mel spectrogram of exactly one second of audio.
pub fn log_mel(w: &Waveform) -> Result<LogMelSpectrogram> {
    extractor().extract(w)
}

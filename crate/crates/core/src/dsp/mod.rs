//! Audio frontend: 16 kHz mono waveforms in, 64×97 log-mel matrices out.

mod augment;
mod cache;
mod mel;
mod resample;
mod segment;
mod wav;

pub use augment::{
    ambient_noise, apply_reverb, augment, mix_noise, noise_gain, reverb_impulse_response,
    AugmentationSpec, ReverbParams,
};
pub use cache::{read_feature_cache, write_feature_cache, FEATURE_MAGIC, FEATURE_VERSION};
pub use mel::{hz_to_mel, log_mel, log_mel_frames, mel_to_hz, LogMelExtractor, LogMelSpectrogram};
pub use resample::resample;
pub use segment::{loudest_segment, sample_segment, Segment, SILENCE_GATE_DBFS};
pub use wav::{load_and_normalize, read_wav_file, write_wav, write_wav_file};

pub const SAMPLE_RATE: u32 = 16_000;
/// One-second analysis segment.
pub const SEGMENT_LEN: usize = 16_000;
pub const N_MELS: usize = 64;
pub const N_FFT: usize = 512;
pub const HOP: usize = 160;
pub const N_FRAMES: usize = (SEGMENT_LEN - N_FFT) / HOP + 1;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> crate::Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(crate::Error::Audio("non-finite sample".into()));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

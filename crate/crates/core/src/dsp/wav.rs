use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Decodes a 16-bit PCM WAV, downmixes to mono and resamples to 16 kHz.
pub fn load_and_normalize(bytes: &[u8]) -> Result<Waveform> {
    let reader =
        WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Audio(format!("bad WAV: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "unsupported encoding: {:?} {}-bit (need 16-bit PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio("zero channels".into()));
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("bad WAV payload: {e}")))?;

    let mono: Vec<f32> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / channels as f32
        })
        .collect();
    let mut samples = resample(&mono, spec.sample_rate, SAMPLE_RATE);
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform::new(samples)
}

pub fn read_wav_file(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_and_normalize(&bytes).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
}

/// Encodes `samples` as 16-bit PCM mono.
pub fn write_wav(samples: &[f32], rate: u32) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer =
            WavWriter::new(&mut buf, spec).map_err(|e| Error::Audio(e.to_string()))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Audio(e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::Audio(e.to_string()))?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav_file(path: &Path, w: &Waveform) -> Result<()> {
    let bytes = write_wav(w.samples(), SAMPLE_RATE)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

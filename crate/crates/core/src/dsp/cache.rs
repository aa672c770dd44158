//! On-disk feature cache: 8-byte magic, u32 LE version, then row-major
//! 64×97 little-endian f32 values.

use super::{LogMelSpectrogram, N_FRAMES, N_MELS};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"HPLOGMEL";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_feature_cache(spec: &LogMelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * spec.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for v in spec.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_feature_cache(bytes: &[u8]) -> Result<LogMelSpectrogram> {
    const WHAT: &str = "feature cache";
    if bytes.len() < 12 {
        return Err(Error::Truncated { what: WHAT });
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::BadMagic { what: WHAT });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion { what: WHAT, version });
    }
    let body = &bytes[12..];
    if body.len() != 4 * N_MELS * N_FRAMES {
        return Err(Error::Truncated { what: WHAT });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    LogMelSpectrogram::from_raw(N_MELS, N_FRAMES, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let data: Vec<f32> = (0..N_MELS * N_FRAMES).map(|i| i as f32 * 0.25 - 3.0).collect();
        let s = LogMelSpectrogram::from_raw(N_MELS, N_FRAMES, data).unwrap();
        let bytes = write_feature_cache(&s);
        assert_eq!(read_feature_cache(&bytes).unwrap(), s);
        assert!(matches!(
            read_feature_cache(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_feature_cache(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(read_feature_cache(&bad), Err(Error::BadVersion { .. })));
    }
}

//! Weight file layout (all integers little-endian):
//!
//! ```text
//! "HPW1" | version u32 | flags u32 | config-json len u32 | config json
//! | sha256(config json) [32] | tensor count u32
//! | per tensor: name len u32, name, ndim u32, dims u32 × ndim
//! | f32 payload of every tensor in order
//! | optional trailer (flags bit 0), e.g. optimizer state
//! ```

use super::{EncoderConfig, EncoderParams, Tensor};
use crate::error::{Error, Result};
use crate::io::Reader;

pub const WEIGHT_MAGIC: &[u8; 4] = b"HPW1";
const VERSION: u32 = 1;
const FLAG_TRAILER: u32 = 1;
const WHAT: &str = "weight file";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialises `params`, appending `trailer` when present.
pub fn save_checkpoint(params: &EncoderParams, trailer: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, if trailer.is_some() { FLAG_TRAILER } else { 0 });
    let json = params.config().to_json();
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&params.config().digest());
    put_u32(&mut out, params.tensors.len() as u32);
    for t in &params.tensors {
        put_u32(&mut out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut out, d as u32);
        }
    }
    for t in &params.tensors {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(extra) = trailer {
        out.extend_from_slice(extra);
    }
    out
}

pub fn save_weights(params: &EncoderParams) -> Vec<u8> {
    save_checkpoint(params, None)
}

/// Parses a weight file, returning the parameters and any trailer. When
/// `expected` is given its digest must match the stored one.
pub fn load_checkpoint<'a>(
    bytes: &'a [u8],
    expected: Option<&EncoderConfig>,
) -> Result<(EncoderParams, Option<&'a [u8]>)> {
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != WEIGHT_MAGIC {
        return Err(Error::BadMagic { what: WHAT });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion { what: WHAT, version });
    }
    let flags = r.u32()?;
    let json_len = r.u32()? as usize;
    let json = r.take(json_len)?;
    let digest = r.take(32)?;
    let config: EncoderConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("{WHAT}: bad config: {e}")))?;
    if config.digest() != digest {
        return Err(Error::DigestMismatch { what: WHAT });
    }
    if let Some(exp) = expected {
        if exp.digest() != config.digest() {
            return Err(Error::DigestMismatch { what: WHAT });
        }
    }
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format(format!("{WHAT}: tensor name is not UTF-8")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor { name, shape, data });
    }
    let params = EncoderParams::from_tensors(&config, tensors)?;
    let rest = r.rest();
    let trailer = if flags & FLAG_TRAILER != 0 {
        Some(rest)
    } else if !rest.is_empty() {
        return Err(Error::Format(format!("{WHAT}: trailing bytes")));
    } else {
        None
    };
    Ok((params, trailer))
}

pub fn load_weights(bytes: &[u8], expected: Option<&EncoderConfig>) -> Result<EncoderParams> {
    load_checkpoint(bytes, expected).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = EncoderConfig::test_config();
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let bytes = save_weights(&p);
        let q = load_weights(&bytes, Some(&cfg)).unwrap();
        assert_eq!(q, p.quantized());
        assert_eq!(save_weights(&q), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = EncoderConfig::test_config();
        let bytes = save_weights(&EncoderParams::init(&cfg, 4).unwrap());
        assert!(matches!(
            load_weights(&bytes[..bytes.len() - 1], None),
            Err(Error::Truncated { .. })
        ));
        let other = EncoderConfig::default();
        assert!(matches!(
            load_weights(&bytes, Some(&other)),
            Err(Error::DigestMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_weights(&bad, None), Err(Error::BadMagic { .. })));
        // Flip a byte inside the embedded config JSON.
        let mut bad = bytes.clone();
        let pos = 16 + 2;
        bad[pos] ^= 0x01;
        assert!(load_weights(&bad, None).is_err());
    }

    #[test]
    fn trailer_round_trip() {
        let cfg = EncoderConfig::test_config();
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let bytes = save_checkpoint(&p, Some(b"state"));
        let (_, t) = load_checkpoint(&bytes, None).unwrap();
        assert_eq!(t, Some(&b"state"[..]));
        assert!(load_checkpoint(&save_weights(&p), None).unwrap().1.is_none());
    }
}

//! AFSQ feature containers.
//!
//! 20-byte header of little-endian fields: magic `"AFSQ"`, `u32` version
//! (1), `u32` frames, `u32` dim, `u32` rate in millihertz; then
//! `frames·dim` little-endian `f64` values, row-major.

use std::fs;
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"AFSQ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode<T: Scalar>(seq: &FeatureSequence<T>) -> Result<Vec<u8>> {
    let rate_mhz = (seq.rate_hz * 1000.0).round();
    if !(0.0..=u32::MAX as f64).contains(&rate_mhz) {
        return Err(Error::InvalidArgument(format!("rate {} Hz not encodable", seq.rate_hz)));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + seq.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(seq.frames, "frames")?.to_le_bytes());
    out.extend_from_slice(&to_u32(seq.dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&(rate_mhz as u32).to_le_bytes());
    for v in &seq.data {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<FeatureSequence<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected AFSQ"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = field(1);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (frames, dim, rate_mhz) = (field(2) as usize, field(3) as usize, field(4));
    let payload = &bytes[HEADER_LEN..];
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(path, "header size overflows"))?;
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: header declares {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: header declares {expected} bytes, found {}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(path, "non-finite value in payload"));
        }
        data.push(T::lit(v));
    }
    FeatureSequence::new(frames, dim, rate_mhz as f64 / 1000.0, data)
}

pub fn write_feature_file<T: Scalar>(path: &Path, seq: &FeatureSequence<T>) -> Result<()> {
    fs::write(path, encode(seq)?).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file<T: Scalar>(path: &Path) -> Result<FeatureSequence<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSequence<f64> {
        let data = (0..300 * 39).map(|i| ((i as f64) * 0.37).sin() * 3.0).collect();
        FeatureSequence::new(300, 39, 100.0, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"AFSQ");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 300);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 39);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 100_000);
        assert_eq!(bytes.len(), HEADER_LEN + 300 * 39 * 8);
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.afsq");
        let seq = sample();
        write_feature_file(&path, &seq).unwrap();
        let back: FeatureSequence<f64> = read_feature_file(&path).unwrap();
        assert_eq!(back, seq);
        assert_eq!(fs::read(&path).unwrap(), encode(&back).unwrap());
    }

    #[test]
    fn corrupt_files() {
        let bytes = encode(&sample()).unwrap();
        let p = Path::new("x");
        assert!(matches!(decode::<f64>(&bytes[..10], p), Err(Error::Format { .. })));
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 8], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(decode::<f64>(&bad, p).is_err());
        // header claims one more frame than the payload carries
        let mut lying = bytes;
        lying[8..12].copy_from_slice(&301u32.to_le_bytes());
        let err = decode::<f64>(&lying, p).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
    }
}

//! AFMD model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "AFMD" | version | config_len | config (UTF-8 JSON) | tensor_count
//!   then per tensor: ndim | dims... | values as f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFMD";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &FusionModel<T>) -> Vec<u8> {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for entry in model.store.entries() {
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in entry.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<FusionModel<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected AFMD"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    let mut model = FusionModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.store.load(tensors).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &FusionModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<FusionModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

//! Binary checkpoint format.
//!
//! ```text
//! magic      "BFFN"
//! version    u32
//! step       u64
//! config     u32 length + UTF-8 TOML echo of the training config
//! tensors    u32 count, then per tensor:
//!            u32 name length + name, u64 rows, u64 cols, u64 byte offset
//! payload    f32 row-major arrays; offsets are relative to payload start
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::numerics::Tensor2D;

pub const MAGIC: &[u8; 4] = b"BFFN";
pub const VERSION: u32 = 1;

/// A model together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Exact TOML echo; kept verbatim so re-saving is byte-identical.
    pub config_toml: String,
    pub config: TrainConfig,
    pub step: u64,
    pub model: TransformerLm<f32>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, step: u64, model: TransformerLm<f32>) -> Result<Self> {
        Ok(Self { config_toml: config.to_toml()?, config: config.clone(), step, model })
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.model.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_toml.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_toml.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config_toml = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let config = TrainConfig::from_toml(&config_toml)?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            dir.push((name, r.u64()? as usize, r.u64()? as usize, r.u64()? as usize));
        }
        let payload = &bytes[r.pos..];

        // Shapes come from the config; the directory must agree with them.
        let mut model = TransformerLm::<f32>::init(&config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, (usize, usize))> =
            model.tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();
        if dir.len() != expected.len() {
            return Err(Error::Checkpoint(format!("{} tensors, config implies {}", dir.len(), expected.len())));
        }
        let mut end = 0usize;
        for ((name, rows, cols, offset), (want, shape)) in dir.iter().zip(&expected) {
            if name != want || (*rows, *cols) != *shape {
                return Err(Error::Checkpoint(format!("tensor {name} {rows}x{cols}, expected {want} {shape:?}")));
            }
            if *offset != end {
                return Err(Error::Checkpoint(format!("tensor {name} at offset {offset}, expected {end}")));
            }
            end += 4 * rows * cols;
        }
        if payload.len() != end {
            return Err(Error::Checkpoint(format!("payload is {} bytes, directory covers {end}", payload.len())));
        }
        for ((_, rows, cols, offset), t) in dir.iter().zip(model.tensors_mut()) {
            let raw = &payload[*offset..*offset + 4 * rows * cols];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            *t = Tensor2D::from_vec(*rows, *cols, data)?;
        }
        Ok(Self { config_toml, config, step, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

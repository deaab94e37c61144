//! Parameter checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "IVRW" | version u16 | config_len u32 | config text
//!        | count u32 | count x (name_len u16, name, dims 4 x u32, f32 data)
//!        | crc32 u32 over everything between the version and the crc
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{build_model, CompressionModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"IVRW";
pub const VERSION: u16 = 1;

/// Truncated SHA-256 of a checkpoint payload, recorded in every bitstream.
pub type ModelHash = [u8; 8];

fn payload(model: &CompressionModel) -> Vec<u8> {
    let cfg = model.config.to_text();
    let mut out = Vec::with_capacity(model.store.numel() * 4 + 4096);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn model_hash(model: &CompressionModel) -> ModelHash {
    hash_payload(&payload(model))
}

fn hash_payload(bytes: &[u8]) -> ModelHash {
    let digest = Sha256::digest(bytes);
    let mut h = [0u8; 8];
    h.copy_from_slice(&digest[..8]);
    h
}

pub fn to_bytes(model: &CompressionModel) -> Vec<u8> {
    let body = payload(model);
    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn from_bytes(bytes: &[u8]) -> Result<(CompressionModel, ModelHash)> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let body = &bytes[6..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let mut model = build_model(&config, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Model(format!(
            "checkpoint has {count} parameters, configuration implies {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        model.store.set_value(&name, shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after parameter records".into()));
    }
    Ok((model, hash_payload(body)))
}

pub fn save(model: &CompressionModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(CompressionModel, ModelHash)> {
    from_bytes(&std::fs::read(path)?)
}

//! Self-describing binary container for parameters and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DYNPLAN\0"
//! version  u32      1
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! count    u32      number of tensors
//! tensor*  u16 name length, name bytes, u64 element count, f64 elements
//! crc      u32      CRC-32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::gridworld::{color_rgb, Color};

pub const MAGIC: &[u8; 8] = b"DYNPLAN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(64 + header.len() + self.tensors.iter().map(|t| t.1.len() * 8 + 16).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            let n = name.as_bytes();
            let len = u16::try_from(n.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(n);
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: serde_json::Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("tensor length overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, data));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header fields every model checkpoint carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: ModelConfig,
    pub codebook_size: usize,
    /// Color name → RGB used by the renderer.
    pub color_map: Vec<(String, [u8; 3])>,
    pub seed: u64,
}

impl ModelHeader {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        ModelHeader {
            config: config.clone(),
            codebook_size: config.codebook_size,
            color_map: Color::ALL.iter().map(|c| (c.name().to_string(), color_rgb(*c))).collect(),
            seed,
        }
    }
}

/// Named tensors of a parameter vector, in layout order.
pub fn params_tensors(p: &ModelParams, prefix: &str) -> Vec<(String, Vec<f64>)> {
    p.layout.tensors.iter().map(|(n, r, _)| (format!("{prefix}{n}"), p.data[r.clone()].to_vec())).collect()
}

/// Rebuilds a flat vector from named tensors written by [`params_tensors`].
pub fn flat_from_tensors(c: &Container, config: &ModelConfig, prefix: &str) -> Result<Vec<f64>> {
    let shell = ModelParams::zeros(config)?;
    let mut data = vec![0.0; shell.len()];
    for (n, r, _) in &shell.layout.tensors {
        let t = c
            .tensor(&format!("{prefix}{n}"))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {prefix}{n}")))?;
        if t.len() != r.len() {
            return Err(Error::CorruptCheckpoint(format!("tensor {prefix}{n} has {} entries, expected {}", t.len(), r.len())));
        }
        data[r.clone()].copy_from_slice(t);
    }
    Ok(data)
}

pub fn model_container(p: &ModelParams, seed: u64) -> Result<Container> {
    Ok(Container { header: serde_json::to_value(ModelHeader::new(&p.config, seed))?, tensors: params_tensors(p, "") })
}

pub fn save_params(p: &ModelParams, seed: u64, path: &Path) -> Result<()> {
    model_container(p, seed)?.save(path)
}

/// Loads a parameters-only checkpoint; returns the params and the seed.
pub fn load_params(path: &Path) -> Result<(ModelParams, u64)> {
    let c = Container::load(path)?;
    let h: ModelHeader = serde_json::from_value(c.header.clone()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let data = flat_from_tensors(&c, &h.config, "")?;
    Ok((ModelParams::from_data(&h.config, data)?, h.seed))
}

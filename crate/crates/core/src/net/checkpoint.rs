//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SPCK"                 magic
//! u32                     format version (1)
//! u32                     header length H in bytes
//! [u8; H]                 UTF-8 JSON header
//! per block:  f32 * len   parameter values, in header block order
//! if optimizer present, per block: f32 * len first moments, f32 * len second moments
//! ```
//!
//! The header records `format_version`, `step`, `stage`, `rng_seed`, an
//! opaque `config` object, the `blocks` list (`name`, `layout`, `rng_seed`,
//! `len`) and, when optimizer state follows, the Adam step counters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::adam::Adam;
use crate::net::params::{LayerSpec, NetParams};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParams {
    pub name: String,
    pub params: NetParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub stage: String,
    pub rng_seed: u64,
    pub config: serde_json::Value,
    pub blocks: Vec<NamedParams>,
    /// One optimizer state per block, in block order.
    pub optimizer: Option<Vec<Adam>>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    layout: Vec<LayerSpec>,
    rng_seed: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    stage: String,
    rng_seed: u64,
    config: serde_json::Value,
    blocks: Vec<BlockHeader>,
    optimizer_steps: Option<Vec<u64>>,
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {}: wanted {n} more",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NetParams> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(opt) = &self.optimizer {
            if opt.len() != self.blocks.len() {
                return Err(Error::Checkpoint("optimizer state count differs from block count".into()));
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            step: self.step,
            stage: self.stage.clone(),
            rng_seed: self.rng_seed,
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    layout: b.params.layout.clone(),
                    rng_seed: b.params.rng_seed,
                    len: b.params.values.len(),
                })
                .collect(),
            optimizer_steps: self.optimizer.as_ref().map(|o| o.iter().map(|a| a.t).collect()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            put_f32s(&mut out, &b.params.values);
        }
        if let Some(opt) = &self.optimizer {
            for a in opt {
                put_f32s(&mut out, &a.m);
                put_f32s(&mut out, &a.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let values = r.f32s(b.len)?;
            let params = NetParams::from_values(&b.layout, values, b.rng_seed)
                .map_err(|e| Error::Checkpoint(format!("block {}: {e}", b.name)))?;
            blocks.push(NamedParams {
                name: b.name.clone(),
                params,
            });
        }
        let optimizer = match &header.optimizer_steps {
            Some(steps) => {
                if steps.len() != blocks.len() {
                    return Err(Error::Checkpoint("optimizer state count differs from block count".into()));
                }
                let mut opt = Vec::new();
                for (b, &t) in header.blocks.iter().zip(steps) {
                    let m = r.f32s(b.len)?;
                    let v = r.f32s(b.len)?;
                    opt.push(Adam { m, v, t });
                }
                Some(opt)
            }
            None => None,
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            step: header.step,
            stage: header.stage,
            rng_seed: header.rng_seed,
            config: header.config,
            blocks,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

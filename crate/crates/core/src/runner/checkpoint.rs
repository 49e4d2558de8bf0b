//! Per-party parameter checkpoints.
//!
//! `party{k}.ckpt` holds the magic `VFCK`, a format version byte, a `u32`
//! tensor count and then, for each tensor, a `u16` name length, the UTF-8
//! name and the tensor in the wire payload layout with 64-bit reals
//! (`ndim: u8`, `dims: u32 × ndim`, `f64` data; all little-endian).
//! `checkpoint.json` lists the files with their SHA-256 digests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"VFCK";
const VERSION: u8 = 1;
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub party: u16,
    pub file: String,
    pub sha256: String,
    pub tensors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u8,
    pub seed: u64,
    pub parties: Vec<CheckpointEntry>,
}

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(bad("truncated"));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params(buf: &[u8]) -> Result<ParamSet> {
    let mut r = Reader(buf);
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(dims, data)?);
    }
    if !r.0.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

/// Writes one file per party (ids `1..=K` in order) plus the manifest.
pub fn save_checkpoint(dir: &Path, seed: u64, parties: &[ParamSet]) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, p) in parties.iter().enumerate() {
        let bytes = encode_params(p);
        let file = format!("party{}.ckpt", i + 1);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(CheckpointEntry {
            party: i as u16 + 1,
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
            tensors: p.len(),
        });
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        seed,
        parties: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(CHECKPOINT_MANIFEST), json + "\n")?;
    Ok(manifest)
}

/// Reads and verifies every party file listed in the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<ParamSet>)> {
    let raw = fs::read(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw).map_err(|e| bad(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    let mut out = Vec::new();
    for (i, e) in manifest.parties.iter().enumerate() {
        if e.party as usize != i + 1 {
            return Err(bad("parties out of order"));
        }
        let bytes = fs::read(dir.join(&e.file))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(bad(format!("{} digest mismatch", e.file)));
        }
        out.push(decode_params(&bytes)?);
    }
    Ok((manifest, out))
}

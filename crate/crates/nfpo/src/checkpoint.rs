//! Self-describing binary checkpoint container.
//!
//! Layout (all little-endian): magic `NFPC`, format version, two
//! length-prefixed JSON blobs (architecture, run state), then named tensor
//! entries of `(name, shape, row-major f32 payload)`. Parameters are stored
//! under their own names; adaptive-moment state under `opt.m.` / `opt.v.`
//! prefixes. Payload bytes round-trip bit-exactly.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::envs::EnvState;
use crate::policy::PolicyArch;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NFPC";
const VERSION: u32 = 1;

/// Everything needed to rebuild the networks without a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchHeader {
    pub policy: PolicyArch,
    pub critic_hidden: Vec<usize>,
}

/// Run bookkeeping for bit-exact resume. Float state that must survive
/// byte-for-byte is stored as bit patterns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub update: u64,
    pub env_steps: u64,
    pub lr_bits: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub instability: bool,
    pub best_return: Option<f64>,
    pub config_toml: String,
    pub env_state: Option<EnvState>,
    pub ep_stats: Option<EpStatsState>,
}

impl RunHeader {
    pub fn lr(&self) -> f64 {
        f64::from_bits(self.lr_bits)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr_bits = lr.to_bits();
    }
}

/// Serializable episode-statistics state (see `runner::EpStats`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpStatsState {
    pub cur_return_bits: Vec<u64>,
    pub cur_len: Vec<u32>,
    pub completed: Vec<(u64, u32)>,
}

pub struct Checkpoint {
    pub arch: ArchHeader,
    pub run: RunHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Collect parameters and optimizer moments from a store.
    pub fn from_store(arch: ArchHeader, run: RunHeader, store: &ParamStore<f32>) -> Self {
        let mut tensors = Vec::with_capacity(store.len() * 3);
        for (name, id) in store.iter() {
            tensors.push((name.to_string(), store.value(id).clone()));
        }
        for (name, id) in store.iter() {
            let (m, v) = store.moments(id);
            tensors.push((format!("opt.m.{name}"), m.clone()));
            tensors.push((format!("opt.v.{name}"), v.clone()));
        }
        Checkpoint { arch, run, tensors }
    }

    /// Rebuild a parameter store (values + moments + step counter).
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, tensor) in &self.tensors {
            if !name.starts_with("opt.") {
                store.insert(name, tensor.clone())?;
            }
        }
        for (name, tensor) in &self.tensors {
            if let Some(base) = name.strip_prefix("opt.m.") {
                let id = store
                    .id(base)
                    .ok_or_else(|| Error::Checkpoint(format!("moment for unknown param {base}")))?;
                let (_, v) = store.moments(id);
                let v = v.clone();
                store.set_moments(id, tensor.clone(), v)?;
            } else if let Some(base) = name.strip_prefix("opt.v.") {
                let id = store
                    .id(base)
                    .ok_or_else(|| Error::Checkpoint(format!("moment for unknown param {base}")))?;
                let (m, _) = store.moments(id);
                let m = m.clone();
                store.set_moments(id, m, tensor.clone())?;
            }
        }
        store.set_adam_step_count(self.run.adam_step);
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.arch)
            .map_err(|e| Error::Checkpoint(format!("arch header: {e}")))?;
        let run = serde_json::to_vec(&self.run)
            .map_err(|e| Error::Checkpoint(format!("run header: {e}")))?;
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&(run.len() as u32).to_le_bytes());
        out.extend_from_slice(&run);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, at: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic (not an NFPC file)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let arch_len = cur.u32()? as usize;
        let arch: ArchHeader = serde_json::from_slice(cur.take(arch_len)?)
            .map_err(|e| Error::Checkpoint(format!("arch header: {e}")))?;
        let run_len = cur.u32()? as usize;
        let run: RunHeader = serde_json::from_slice(cur.take(run_len)?)
            .map_err(|e| Error::Checkpoint(format!("run header: {e}")))?;
        let n_entries = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = cur.take(4)?;
                data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { arch, run, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

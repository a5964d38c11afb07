//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `DRTXCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian `f64` data of every tensor in header order. The header
//! holds a `meta` object (kind, descriptors, settings) and a `tensors` index
//! of `{name, shape}` entries sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoisers::{ConsistencyDescriptor, ConsistencyParams, DenoiserParams, UNetDescriptor};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::nn::ParamStore;
use crate::tdn::{TdnDescriptor, TdnParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRTXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Metadata plus named tensors, the unit read and written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| TensorEntry { name: k.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let data_len: usize = self.tensors.values().map(|t| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;
        let mut data = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(Error::Format(format!("truncated data for tensor {}", entry.name)));
            }
            let (head, rest) = data.split_at(n * 8);
            let values = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(entry.name, Tensor::new(entry.shape, values)?);
            data = rest;
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", data.len())));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e))
    }

    fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|k| k.as_str())
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    fn take_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors.iter().filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone()))).collect()
    }
}

fn put_prefix(into: &mut BTreeMap<String, Tensor>, prefix: &str, store: &ParamStore) {
    for (k, t) in store.iter() {
        into.insert(format!("{prefix}.{k}"), t.clone());
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TdnMeta {
    kind: String,
    descriptor: TdnDescriptor,
    iterations: usize,
}

/// Trained decomposition network.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnCheckpoint {
    pub params: TdnParams,
    pub iterations: usize,
}

impl TdnCheckpoint {
    pub const KIND: &'static str = "tdn";

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = TdnMeta {
            kind: Self::KIND.into(),
            descriptor: self.params.descriptor().clone(),
            iterations: self.iterations,
        };
        let mut tensors = BTreeMap::new();
        put_prefix(&mut tensors, "tdn", self.params.store());
        Ok(Archive { meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind() != Some(Self::KIND) {
            return Err(Error::Format(format!("expected a {} checkpoint, found {:?}", Self::KIND, a.kind())));
        }
        let meta: TdnMeta = serde_json::from_value(a.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let params = TdnParams::from_parts(meta.descriptor, ParamStore::from_map(a.take_prefix("tdn")))?;
        Ok(Self { params, iterations: meta.iterations })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?).map_err(|e| Error::file(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionMeta {
    kind: String,
    stage: String,
    denoiser: UNetDescriptor,
    consistency: ConsistencyDescriptor,
    schedule: ScheduleConfig,
    posterior_mean: String,
    iterations: usize,
}

/// One trained adjustment path (reflectance or illumination).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionCheckpoint {
    /// `rda` or `ida`.
    pub stage: String,
    pub denoiser: DenoiserParams,
    pub consistency: ConsistencyParams,
    pub schedule_config: ScheduleConfig,
    /// The realised betas, stored so sampling does not depend on rebuilding.
    pub schedule: NoiseSchedule,
    pub posterior_mean: String,
    pub iterations: usize,
}

impl DiffusionCheckpoint {
    pub const KIND: &'static str = "diffusion";
    const BETAS: &'static str = "schedule.beta";

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = DiffusionMeta {
            kind: Self::KIND.into(),
            stage: self.stage.clone(),
            denoiser: self.denoiser.descriptor().clone(),
            consistency: self.consistency.descriptor().clone(),
            schedule: self.schedule_config.clone(),
            posterior_mean: self.posterior_mean.clone(),
            iterations: self.iterations,
        };
        let mut tensors = BTreeMap::new();
        put_prefix(&mut tensors, "denoiser", self.denoiser.store());
        put_prefix(&mut tensors, "consistency", self.consistency.store());
        let beta = self.schedule.beta().to_vec();
        tensors.insert(Self::BETAS.into(), Tensor::new(vec![beta.len()], beta)?);
        Ok(Archive { meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind() != Some(Self::KIND) {
            return Err(Error::Format(format!("expected a {} checkpoint, found {:?}", Self::KIND, a.kind())));
        }
        let meta: DiffusionMeta = serde_json::from_value(a.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let beta = a.tensors.get(Self::BETAS).ok_or_else(|| Error::Format("missing schedule betas".into()))?;
        Ok(Self {
            stage: meta.stage,
            denoiser: DenoiserParams::from_parts(meta.denoiser, ParamStore::from_map(a.take_prefix("denoiser")))?,
            consistency: ConsistencyParams::from_parts(
                meta.consistency,
                ParamStore::from_map(a.take_prefix("consistency")),
            )?,
            schedule_config: meta.schedule,
            schedule: NoiseSchedule::from_betas(beta.data().to_vec())?,
            posterior_mean: meta.posterior_mean,
            iterations: meta.iterations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?).map_err(|e| Error::file(path, e))
    }
}

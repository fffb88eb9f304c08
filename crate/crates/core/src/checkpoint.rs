//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `FEWSUMCK`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header, then raw little-endian `f64` tensor
//! data. The header carries the configuration, free-form string metadata and
//! a manifest of `(name, shape, dtype, byte offset)` entries; offsets are
//! relative to the start of the data section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PluginConfig};
use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::plugin::Plugin;

pub const MAGIC: &[u8; 8] = b"FEWSUMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// The in-memory form of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub metadata: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: [t.rows(), t.cols()],
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let data_start = 16 + hlen;
        if bytes.len() < data_start {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], values));
        }
        Ok(Checkpoint {
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct StateConfig {
    model: ModelConfig,
    plugin: Option<PluginConfig>,
}

/// Model, optional plug-in and optional extra tensors (e.g. optimiser
/// moments under their own prefix) in one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub model: Model,
    pub plugin: Option<Plugin>,
    pub extra: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

impl TrainingState {
    pub fn new(model: Model, plugin: Option<Plugin>) -> Self {
        TrainingState {
            model,
            plugin,
            extra: ParamStore::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(StateConfig {
            model: self.model.cfg.clone(),
            plugin: self.plugin.as_ref().map(|p| p.cfg.clone()),
        })
        .expect("config serialises");
        let mut tensors = ParamStore::new();
        tensors.extend_from(&self.model.params);
        if let Some(p) = &self.plugin {
            tensors.extend_from(&p.params);
        }
        tensors.extend_from(&self.extra);
        Checkpoint {
            config,
            metadata: self.metadata.clone(),
            tensors,
        }
    }

    /// Splits a checkpoint back into its parts and validates every shape
    /// against the stored configuration.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let sc: StateConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let mut model_params = ParamStore::new();
        let mut plugin_params = ParamStore::new();
        let mut extra = ParamStore::new();
        let model_names: std::collections::HashSet<String> =
            crate::model::manifest(&sc.model).into_iter().map(|(n, _)| n).collect();
        for (name, t) in ck.tensors.iter() {
            if model_names.contains(name) || name == crate::model::TASK_EMBEDDING {
                model_params.insert(name, t.clone());
            } else if name.starts_with("plugin.") {
                plugin_params.insert(name, t.clone());
            } else {
                extra.insert(name, t.clone());
            }
        }
        let model = Model {
            cfg: sc.model.clone(),
            params: model_params,
        };
        model.check_shapes()?;
        let plugin = match sc.plugin {
            Some(pc) => {
                let p = Plugin {
                    cfg: pc,
                    d_memory: sc.model.d_model,
                    params: plugin_params,
                };
                p.check_shapes()?;
                Some(p)
            }
            None if !plugin_params.is_empty() => {
                return Err(Error::Checkpoint("plug-in tensors without a plug-in config".into()))
            }
            None => None,
        };
        Ok(TrainingState {
            model,
            plugin,
            extra,
            metadata: ck.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

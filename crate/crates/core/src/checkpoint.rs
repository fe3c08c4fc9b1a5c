//! Checkpoint directories.
//!
//! ```text
//! config.json      model config, input normalization, epoch, seed, optimizer step
//! tensors.bin      u64 LE index length, JSON index, then LE f32 blobs
//! hierarchy.hash   fingerprint of the sampling operators
//! hierarchy/       the operators themselves
//! template.obj     template mesh the hierarchy was built from
//! ```
//!
//! The tensor index is `[{"name", "offset", "shape"}]` with byte offsets
//! relative to the first blob. Optimizer moments are stored as
//! `adam.m/<param>` and `adam.v/<param>`. Training streams are keyed by
//! `(seed, epoch)`, so those two numbers are the whole PRNG state.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hierarchy::{HierarchyError, MeshHierarchy};
use crate::mesh::hex;
use crate::model::{MeshVae, ModelConfig, ModelError, Normalization, ParamStore};
use crate::obj::{self, ObjError};
use crate::optim::{AdamConfig, AdamState};
use crate::TriangleMesh;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const HASH_FILE: &str = "hierarchy.hash";
pub const HIERARCHY_DIR: &str = "hierarchy";
pub const TEMPLATE_FILE: &str = "template.obj";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("hierarchy hash mismatch: checkpoint records {expected}, operators hash to {found}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Obj(#[from] ObjError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub normalization: Normalization,
    /// Last completed epoch (0-based).
    pub epoch: usize,
    pub seed: u64,
    pub val_recon_rmse: Option<f64>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub template: TriangleMesh,
    pub model: MeshVae<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: [usize; 2],
}

fn encode_tensors(tensors: &[(String, &Array2<f32>)]) -> Vec<u8> {
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        index.push(TensorEntry {
            name: name.clone(),
            offset,
            shape: [t.nrows(), t.ncols()],
        });
        offset += 4 * t.len() as u64;
    }
    let index = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(8 + index.len() + offset as usize);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for (_, t) in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Array2<f32>)>, CheckpointError> {
    let bad = |m: &str| CheckpointError::Format(format!("{TENSORS_FILE}: {m}"));
    let mut r = bytes;
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(bad("truncated index"));
    }
    let index: Vec<TensorEntry> = serde_json::from_slice(&r[..len]).map_err(|e| bad(&e.to_string()))?;
    let data = &r[len..];
    let mut out = Vec::with_capacity(index.len());
    let mut expected_offset = 0usize;
    for e in index {
        let count = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        if start != expected_offset || start + 4 * count > data.len() {
            return Err(bad(&format!("tensor {} lies outside the data section", e.name)));
        }
        let values: Vec<f32> = data[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).expect("count matches shape");
        out.push((e.name, arr));
        expected_offset = start + 4 * count;
    }
    if expected_offset != data.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn config_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn tensor_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Array2<f32>)> =
            self.model.params().iter().map(|(n, v)| (n.to_string(), v)).collect();
        if let Some(opt) = &self.optimizer {
            let names = self.model.params().names();
            for (n, m) in names.iter().zip(&opt.m) {
                tensors.push((format!("adam.m/{n}"), m));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                tensors.push((format!("adam.v/{n}"), v));
            }
        }
        encode_tensors(&tensors)
    }

    /// SHA-256 over the config and tensor files.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_bytes());
        h.update(self.tensor_bytes());
        hex(&h.finalize())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))
        };
        write(CONFIG_FILE, &self.config_bytes())?;
        write(TENSORS_FILE, &self.tensor_bytes())?;
        let hierarchy = self.model.hierarchy();
        write(HASH_FILE, format!("{}\n", hierarchy.fingerprint()).as_bytes())?;
        hierarchy.save(dir.join(HIERARCHY_DIR))?;
        obj::write_obj(dir.join(TEMPLATE_FILE), &self.template)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        let meta: CheckpointMeta =
            serde_json::from_slice(&read(CONFIG_FILE)?).map_err(|e| CheckpointError::Format(format!("{CONFIG_FILE}: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(meta.version));
        }
        let expected = String::from_utf8_lossy(&read(HASH_FILE)?).trim().to_string();
        let hierarchy = MeshHierarchy::load(dir.join(HIERARCHY_DIR))?;
        let found = hierarchy.fingerprint();
        if found != expected {
            return Err(CheckpointError::HashMismatch { expected, found });
        }
        let template = obj::load_obj(dir.join(TEMPLATE_FILE))?;

        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Array2<f32>)> = Vec::new();
        for (name, value) in decode_tensors(&read(TENSORS_FILE)?)? {
            if name.starts_with("adam.") {
                moments.push((name, value));
            } else {
                params.push(name, value);
            }
        }
        let model = MeshVae::from_params(
            meta.model.clone(),
            Arc::new(hierarchy),
            template.shared_faces(),
            meta.normalization,
            params,
        )?;
        let optimizer = match &meta.optimizer {
            None if moments.is_empty() => None,
            None => return Err(CheckpointError::Format("optimizer moments without optimizer metadata".into())),
            Some(o) => {
                let n = model.params().len();
                if moments.len() != 2 * n {
                    return Err(CheckpointError::Format(format!(
                        "expected {} optimizer tensors, found {}",
                        2 * n,
                        moments.len()
                    )));
                }
                for (i, name) in model.params().names().iter().enumerate() {
                    let (m, v) = (&moments[i], &moments[n + i]);
                    if m.0 != format!("adam.m/{name}")
                        || v.0 != format!("adam.v/{name}")
                        || m.1.dim() != model.params().values()[i].dim()
                        || v.1.dim() != m.1.dim()
                    {
                        return Err(CheckpointError::Format(format!("optimizer tensors for {name} are missing or misshapen")));
                    }
                }
                let mut it = moments.into_iter().map(|(_, a)| a);
                let m: Vec<_> = it.by_ref().take(n).collect();
                let v: Vec<_> = it.collect();
                Some(AdamState {
                    config: o.config,
                    m,
                    v,
                    t: o.step,
                })
            }
        };
        Ok(Self {
            meta,
            template,
            model,
            optimizer,
        })
    }
}

//! On-disk synthetic datasets: OBJ meshes plus a versioned `manifest.json`.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::TriangleMesh;
use crate::obj::{self, ObjError};
use crate::synth::{self, counter_rng, tags, FactorLabels, PoseParams, ShapeParams, SynthError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least 2 subjects and 2 poses per subject, got {subjects} and {poses}")]
    TooSmall { subjects: usize, poses: usize },
    #[error("cannot write dataset to {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("mesh {path}: {source}")]
    Mesh {
        path: PathBuf,
        #[source]
        source: ObjError,
    },
    #[error("mesh {path} has topology {found}, manifest template is {expected}")]
    Topology {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitAssignment {
    /// Subject-disjoint 70/15/15 split in subject index order.
    ///
    /// Validation and test each get `round(0.15·n)` subjects; test always
    /// gets at least one and validation at least one once `n ≥ 3`.
    pub fn by_subject_order(n_subjects: usize) -> Self {
        let fifteen = (0.15 * n_subjects as f64).round() as usize;
        let n_test = fifteen.max(1);
        let n_val = if n_subjects >= 3 { fifteen.max(1) } else { 0 };
        let n_train = n_subjects - n_test - n_val;
        let ids: Vec<u64> = (0..n_subjects as u64).collect();
        Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }

    pub fn of(&self, subject: u64) -> Option<Split> {
        if self.train.contains(&subject) {
            Some(Split::Train)
        } else if self.val.contains(&subject) {
            Some(Split::Val)
        } else if self.test.contains(&subject) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn subjects(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Path relative to the manifest directory.
    pub path: String,
    pub pose_index: usize,
    pub labels: FactorLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub template_topology_hash: String,
    pub generator_seed: u64,
    pub n_subjects: usize,
    pub n_poses_per_subject: usize,
    pub split: SplitAssignment,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DatasetError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), DatasetError> {
        if self.version != MANIFEST_VERSION {
            return Err(DatasetError::Malformed(format!("unsupported manifest version {}", self.version)));
        }
        let train: BTreeSet<_> = self.split.train.iter().collect();
        let val: BTreeSet<_> = self.split.val.iter().collect();
        let test: BTreeSet<_> = self.split.test.iter().collect();
        if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
            return Err(DatasetError::Malformed("splits share subjects".into()));
        }
        for s in &self.samples {
            if self.split.of(s.labels.subject_id).is_none() {
                return Err(DatasetError::Malformed(format!(
                    "sample {} has subject {} in no split",
                    s.path, s.labels.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Indices of samples whose subject is in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.split.of(self.samples[i].labels.subject_id) == Some(split))
            .collect()
    }

    /// Shape parameters of `subject`, taken from its first sample.
    pub fn shape_of(&self, subject: u64) -> Option<&ShapeParams> {
        self.samples
            .iter()
            .find(|s| s.labels.subject_id == subject)
            .map(|s| &s.labels.shape)
    }
}

fn mesh_file_name(subject: usize, pose: usize) -> String {
    format!("meshes/s{subject:04}_p{pose:04}.obj")
}

pub fn subject_shape(seed: u64, subject: u64) -> ShapeParams {
    ShapeParams::sample(&mut counter_rng(seed, tags::SHAPE, subject, 0), subject)
}

pub fn sample_pose(seed: u64, subject: u64, pose: u64) -> PoseParams {
    PoseParams::sample(&mut counter_rng(seed, tags::POSE, subject, pose))
}

/// Draws the dataset and writes `meshes/*.obj` plus `manifest.json` under `out_dir`.
pub fn sample_dataset(
    n_subjects: usize,
    n_poses_per_subject: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    if n_subjects < 2 || n_poses_per_subject < 2 {
        return Err(DatasetError::TooSmall {
            subjects: n_subjects,
            poses: n_poses_per_subject,
        });
    }
    let out_dir = out_dir.as_ref();
    let unwritable = |source| DatasetError::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(out_dir.join("meshes")).map_err(unwritable)?;

    let mut samples = Vec::with_capacity(n_subjects * n_poses_per_subject);
    for s in 0..n_subjects {
        let shape = subject_shape(seed, s as u64);
        for p in 0..n_poses_per_subject {
            let pose = sample_pose(seed, s as u64, p as u64);
            let mesh = synth::generate_mesh(&shape, &pose)?;
            let rel = mesh_file_name(s, p);
            obj::write_obj(out_dir.join(&rel), &mesh).map_err(|e| match e {
                ObjError::Write { source, .. } => unwritable(source),
                other => DatasetError::Mesh {
                    path: out_dir.join(&rel),
                    source: other,
                },
            })?;
            samples.push(SampleEntry {
                path: rel,
                pose_index: p,
                labels: FactorLabels {
                    subject_id: s as u64,
                    shape: shape.clone(),
                    pose,
                    sequence_id: None,
                    time_index: None,
                    canonical_time: None,
                },
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        template_topology_hash: crate::mesh::topology_hash(&synth::template_faces()),
        generator_seed: seed,
        n_subjects,
        n_poses_per_subject,
        split: SplitAssignment::by_subject_order(n_subjects),
        samples,
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()).map_err(unwritable)?;
    Ok(manifest)
}

/// A manifest with its meshes loaded and checked against the template hash.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub meshes: Vec<TriangleMesh>,
}

impl Dataset {
    /// Loads from a dataset directory or a path to its `manifest.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = DatasetManifest::load(&manifest_path)?;
        let mut meshes: Vec<TriangleMesh> = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let p = root.join(&s.path);
            let mut mesh = obj::load_obj(&p).map_err(|source| DatasetError::Mesh {
                path: p.clone(),
                source,
            })?;
            match meshes.first() {
                // share one face allocation across the dataset
                Some(first) if first.faces() == mesh.faces() => {
                    mesh = first.with_vertices(mesh.vertices().to_vec()).expect("same size");
                }
                _ => {
                    let found = mesh.topology_hash();
                    if found != manifest.template_topology_hash {
                        return Err(DatasetError::Topology {
                            path: p,
                            expected: manifest.template_topology_hash.clone(),
                            found,
                        });
                    }
                }
            }
            meshes.push(mesh);
        }
        if meshes.is_empty() {
            return Err(DatasetError::Malformed("manifest lists no samples".into()));
        }
        Ok(Self { root, manifest, meshes })
    }

    pub fn template(&self) -> &TriangleMesh {
        &self.meshes[0]
    }

    pub fn labels(&self, i: usize) -> &FactorLabels {
        &self.manifest.samples[i].labels
    }
}

//! Downstream uses of the split latent code. All tasks work on posterior
//! means and compare codes with the Euclidean metric.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Scalar;
use crate::mesh::{topology_hash, vertex_rmse, MeshError, TriangleMesh};
use crate::model::{LatentCode, MeshVae, ModelError};
use crate::synth::{counter_rng, tags};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("mesh is not on the model's template: {0}")]
    Topology(MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Monotone alignment from `(0, 0)` to `(len_a − 1, len_b − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub subject_id: u64,
    pub gallery_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct PriorSamples {
    pub meshes: Vec<TriangleMesh>,
    /// Mean pairwise per-vertex RMSE; `None` for a single sample.
    pub diversity: Option<f64>,
    /// Mean per-vertex RMSE from each sample to its nearest reference mesh.
    pub specificity: Option<f64>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_template<T: Scalar>(model: &MeshVae<T>, mesh: &TriangleMesh) -> Result<(), TaskError> {
    if mesh.faces() == model.faces().as_slice() {
        Ok(())
    } else {
        Err(TaskError::Topology(MeshError::TopologyMismatch {
            expected: topology_hash(model.faces()),
            found: mesh.topology_hash(),
        }))
    }
}

fn encode_checked<T: Scalar>(model: &MeshVae<T>, meshes: &[&TriangleMesh]) -> Result<Vec<LatentCode>, TaskError> {
    for m in meshes {
        check_template(model, m)?;
    }
    Ok(model.encode_means(meshes)?)
}

/// Shape of `shape_source` in the pose of `pose_source`.
pub fn transfer<T: Scalar>(
    model: &MeshVae<T>,
    shape_source: &TriangleMesh,
    pose_source: &TriangleMesh,
) -> Result<TriangleMesh, TaskError> {
    let codes = encode_checked(model, &[shape_source, pose_source])?;
    let z = codes[0].swap_pose(&codes[1]);
    Ok(model.decode_meshes(&[z])?.remove(0))
}

/// Dynamic time warping over a precomputed cost matrix `d[i][j]`.
///
/// Backtracking prefers the diagonal predecessor, then `(i−1, j)`, then
/// `(i, j−1)` when accumulated costs tie.
pub fn dtw_from_costs(d: &[Vec<f64>]) -> AlignmentPath {
    let (n, m) = (d.len(), d[0].len());
    let mut acc = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[i - 1][j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[i - 1][j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i][j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i][j] = d[i][j] + best;
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut pairs = vec![(i, j)];
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[i - 1][j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[i - 1][j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i][j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    AlignmentPath {
        pairs,
        cost: acc[n - 1][m - 1],
    }
}

/// DTW between two embedding sequences under the Euclidean distance.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<AlignmentPath, TaskError> {
    if a.is_empty() {
        return Err(TaskError::EmptySequence("first"));
    }
    if b.is_empty() {
        return Err(TaskError::EmptySequence("second"));
    }
    let d: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| euclidean(x, y)).collect()).collect();
    Ok(dtw_from_costs(&d))
}

/// Aligns two mesh sequences through their pose codes.
pub fn synchronize<T: Scalar>(
    model: &MeshVae<T>,
    seq_a: &[&TriangleMesh],
    seq_b: &[&TriangleMesh],
) -> Result<AlignmentPath, TaskError> {
    if seq_a.is_empty() {
        return Err(TaskError::EmptySequence("first"));
    }
    if seq_b.is_empty() {
        return Err(TaskError::EmptySequence("second"));
    }
    let pa: Vec<Vec<f64>> = encode_checked(model, seq_a)?.into_iter().map(|c| c.z_pose).collect();
    let pb: Vec<Vec<f64>> = encode_checked(model, seq_b)?.into_iter().map(|c| c.z_pose).collect();
    dtw(&pa, &pb)
}

/// Gallery entries by ascending distance to `query`; exact ties keep
/// gallery order.
pub fn rank_codes(query: &[f64], gallery: &[(Vec<f64>, u64)]) -> Vec<RankedEntry> {
    let mut ranked: Vec<RankedEntry> = gallery
        .iter()
        .enumerate()
        .map(|(i, (code, subject))| RankedEntry {
            subject_id: *subject,
            gallery_index: i,
            distance: euclidean(query, code),
        })
        .collect();
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    ranked
}

/// Ranks gallery subjects by shape-code distance to `query`.
pub fn match_shape<T: Scalar>(
    model: &MeshVae<T>,
    query: &TriangleMesh,
    gallery: &[(&TriangleMesh, u64)],
) -> Result<Vec<RankedEntry>, TaskError> {
    if gallery.is_empty() {
        return Err(TaskError::EmptyGallery);
    }
    let mut meshes = vec![query];
    meshes.extend(gallery.iter().map(|(m, _)| *m));
    let codes = encode_checked(model, &meshes)?;
    let entries: Vec<(Vec<f64>, u64)> = codes[1..]
        .iter()
        .zip(gallery)
        .map(|(c, (_, s))| (c.z_shape.clone(), *s))
        .collect();
    Ok(rank_codes(&codes[0].z_shape, &entries))
}

/// Decodes `n` standard-normal codes drawn from a stream keyed by `seed`.
/// Specificity is measured against `reference` and is `None` without one.
pub fn sample_prior<T: Scalar>(
    model: &MeshVae<T>,
    n: usize,
    seed: u64,
    reference: &[&TriangleMesh],
) -> Result<PriorSamples, TaskError> {
    if n == 0 {
        return Err(TaskError::NoSamples);
    }
    let cfg = model.config();
    let mut rng = counter_rng(seed, tags::SAMPLE, 0, 0);
    let codes: Vec<LatentCode> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..cfg.latent_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            LatentCode::split(&z, cfg.latent_shape)
        })
        .collect();
    let meshes = model.decode_meshes(&codes)?;

    let diversity = (n > 1).then(|| {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += vertex_rmse(meshes[i].vertices(), meshes[j].vertices());
            }
        }
        sum / (n * (n - 1) / 2) as f64
    });
    let specificity = (!reference.is_empty()).then(|| {
        meshes
            .iter()
            .map(|s| {
                reference
                    .iter()
                    .map(|r| vertex_rmse(s.vertices(), r.vertices()))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / n as f64
    });
    Ok(PriorSamples {
        meshes,
        diversity,
        specificity,
    })
}

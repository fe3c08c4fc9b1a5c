//! Evaluation of a trained model: reconstruction, linear and centroid probes
//! on each latent subspace, and the downstream tasks scored against the
//! generator's ground truth.
//!
//! Protocols (all on the test subjects unless stated):
//!
//! * pose probes: ridge regression from codes to normalized joint angles,
//!   fit on the training split and scored by R² on the test split;
//! * subject probes: nearest class centroid, fit on even pose indices and
//!   scored on odd ones;
//! * transfer: seeded pairs of different subjects, decoded against the
//!   generator output for (shape of the first, pose of the second);
//! * sync: a canonical trajectory against its `t²` warp on another subject;
//!   a frame counts as correct when its aligned index is within the
//!   tolerance of the true one;
//! * match: each subject's lowest pose index forms the gallery, every other
//!   test mesh is a query;
//! * sampling: prior draws compared with the training meshes.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Scalar;
use crate::dataset::{Dataset, Split};
use crate::mesh::TriangleMesh;
use crate::model::{MeshVae, ModelError};
use crate::synth::{self, counter_rng, tags, SynthError};
use crate::tasks::{self, euclidean, TaskError};
use crate::trainer::{mean_rmse, reconstruction_rmse, validation_indices};

pub const EVAL_REPORT_VERSION: u32 = 1;
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const RIDGE_LAMBDA: f64 = 1e-3;

// sub-stream ids under the EVAL tag
const TRANSFER_STREAM: u64 = 0;
const SYNC_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the {0:?} split is empty")]
    EmptySplit(Split),
    #[error("probe inputs are inconsistent: {0}")]
    Probe(String),
    #[error("ridge system is not positive definite")]
    Singular,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Linear map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `inputs × outputs`.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        (self.weights.transpose() * x + &self.intercept).iter().copied().collect()
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

/// Closed-form ridge regression `(XᵀX + λI)⁻¹ XᵀY`.
///
/// With `intercept`, inputs and targets are centered first so the
/// intercept is not penalized.
pub fn ridge_fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64, intercept: bool) -> Result<RidgeModel, EvalError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(EvalError::Probe(format!("{} inputs for {} targets", x.len(), y.len())));
    }
    let (d, k) = (x[0].len(), y[0].len());
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != k) {
        return Err(EvalError::Probe("ragged rows".into()));
    }
    let mut xm = to_matrix(x);
    let mut ym = to_matrix(y);
    let (x_mean, y_mean) = if intercept {
        let xm_mean = xm.row_mean();
        let ym_mean = ym.row_mean();
        for mut r in xm.row_iter_mut() {
            r -= &xm_mean;
        }
        for mut r in ym.row_iter_mut() {
            r -= &ym_mean;
        }
        (xm_mean.transpose(), ym_mean.transpose())
    } else {
        (DVector::zeros(d), DVector::zeros(k))
    };
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * lambda;
    let chol = gram.cholesky().ok_or(EvalError::Singular)?;
    let weights = chol.solve(&(xm.transpose() * &ym));
    let intercept = y_mean - weights.transpose() * x_mean;
    Ok(RidgeModel { weights, intercept })
}

/// Coefficient of determination pooled over output dimensions:
/// `1 − Σ (y − ŷ)² / Σ (y − ȳ)²`. `None` when the targets do not vary.
pub fn r2_score(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Option<f64> {
    if y_true.is_empty() {
        return None;
    }
    let k = y_true[0].len();
    let n = y_true.len() as f64;
    let mean: Vec<f64> = (0..k).map(|c| y_true.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (t, p) in y_true.iter().zip(y_pred) {
        for c in 0..k {
            ss_res += (t[c] - p[c]).powi(2);
            ss_tot += (t[c] - mean[c]).powi(2);
        }
    }
    if ss_tot <= f64::EPSILON * n {
        None
    } else {
        Some(1.0 - ss_res / ss_tot)
    }
}

/// Per-class mean vectors.
#[derive(Debug, Clone)]
pub struct CentroidClassifier {
    centroids: Vec<(u64, Vec<f64>)>,
}

impl CentroidClassifier {
    pub fn fit(x: &[Vec<f64>], labels: &[u64]) -> Self {
        let mut sums: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
        for (v, &l) in x.iter().zip(labels) {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; v.len()], 0));
            e.0.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            e.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(l, (s, c))| (l, s.into_iter().map(|x| x / c as f64).collect()))
            .collect();
        Self { centroids }
    }

    pub fn class_count(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid; ties go to the smallest label.
    pub fn predict(&self, x: &[f64]) -> u64 {
        let mut best = (f64::INFINITY, u64::MAX);
        for (l, c) in &self.centroids {
            let d = euclidean(x, c);
            if d < best.0 {
                best = (d, *l);
            }
        }
        best.1
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[u64]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(v, &l)| self.predict(v) == l).count();
        hits as f64 / x.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub seed: u64,
    pub n_samples: usize,
    pub transfer_pairs: usize,
    pub sync_pairs: usize,
    pub sync_frames: usize,
    pub sync_tolerance: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 64,
            transfer_pairs: 50,
            sync_pairs: 5,
            sync_frames: 20,
            sync_tolerance: 2,
        }
    }
}

/// Metrics are `null` when they cannot be computed; `null_reasons` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_test_meshes: usize,
    pub recon_rmse: Option<f64>,
    pub val_recon_rmse: Option<f64>,
    pub mean_mesh_baseline_rmse: Option<f64>,
    pub pose_probe_r2_from_pose: Option<f64>,
    pub pose_probe_r2_from_shape: Option<f64>,
    pub subject_probe_acc_from_shape: Option<f64>,
    pub subject_probe_acc_from_pose: Option<f64>,
    pub subject_chance_acc: Option<f64>,
    pub transfer_rmse_vs_oracle: Option<f64>,
    pub sync_frame_accuracy: Option<f64>,
    pub match_precision_at_1: Option<f64>,
    pub sample_diversity: Option<f64>,
    pub sample_specificity: Option<f64>,
    pub null_reasons: BTreeMap<String, String>,
}

impl EvalReport {
    /// Pretty JSON with keys in lexicographic order.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let io = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(path, self.to_json()).map_err(io)
    }
}

struct Nulls(BTreeMap<String, String>);

impl Nulls {
    fn check(&mut self, name: &str, value: Option<f64>, reason: impl Into<String>) -> Option<f64> {
        if value.is_none() {
            self.0.insert(name.to_string(), reason.into());
        }
        value
    }
}

fn meshes_of<'d>(dataset: &'d Dataset, idx: &[usize]) -> Vec<&'d TriangleMesh> {
    idx.iter().map(|&i| &dataset.meshes[i]).collect()
}

pub fn evaluate<T: Scalar>(model: &MeshVae<T>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let manifest = &dataset.manifest;
    let train_idx = manifest.indices(Split::Train);
    let test_idx = manifest.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(EvalError::EmptySplit(Split::Test));
    }
    let train = meshes_of(dataset, &train_idx);
    let test = meshes_of(dataset, &test_idx);
    let val = meshes_of(dataset, &validation_indices(dataset));
    let mut nulls = Nulls(BTreeMap::new());

    let recon_rmse = Some(reconstruction_rmse(model, &test)?);
    let val_recon_rmse = Some(reconstruction_rmse(model, &val)?);
    let baseline = (!train.is_empty()).then(|| crate::trainer::mean_mesh_baseline_rmse(&train, &test));
    let baseline = nulls.check("mean_mesh_baseline_rmse", baseline, "no training meshes");

    let test_codes = model.encode_means(&test)?;
    let test_labels: Vec<_> = test_idx.iter().map(|&i| dataset.labels(i)).collect();

    // pose probes
    let (r2_pose, r2_shape) = if train.is_empty() {
        (None, None)
    } else {
        let train_codes = model.encode_means(&train)?;
        let y_train: Vec<Vec<f64>> = train_idx.iter().map(|&i| dataset.labels(i).pose.normalized()).collect();
        let y_test: Vec<Vec<f64>> = test_labels.iter().map(|l| l.pose.normalized()).collect();
        let probe = |pick: fn(&crate::LatentCode) -> &Vec<f64>| -> Result<Option<f64>, EvalError> {
            let xt: Vec<Vec<f64>> = train_codes.iter().map(|c| pick(c).clone()).collect();
            let xs: Vec<Vec<f64>> = test_codes.iter().map(|c| pick(c).clone()).collect();
            let fit = ridge_fit(&xt, &y_train, RIDGE_LAMBDA, true)?;
            let pred: Vec<Vec<f64>> = xs.iter().map(|x| fit.predict(x)).collect();
            Ok(r2_score(&y_test, &pred))
        };
        (probe(|c| &c.z_pose)?, probe(|c| &c.z_shape)?)
    };
    let why = if train.is_empty() { "no training meshes" } else { "test pose labels do not vary" };
    let r2_pose = nulls.check("pose_probe_r2_from_pose", r2_pose, why);
    let r2_shape = nulls.check("pose_probe_r2_from_shape", r2_shape, why);

    // subject probes
    let mut subjects: Vec<u64> = test_labels.iter().map(|l| l.subject_id).collect();
    subjects.dedup();
    let (acc_shape, acc_pose, chance) = if subjects.len() < 2 {
        (None, None, None)
    } else {
        let (mut fit_i, mut score_i) = (Vec::new(), Vec::new());
        for (k, &i) in test_idx.iter().enumerate() {
            if manifest.samples[i].pose_index % 2 == 0 {
                fit_i.push(k);
            } else {
                score_i.push(k);
            }
        }
        let labels_of = |ks: &[usize]| -> Vec<u64> { ks.iter().map(|&k| test_labels[k].subject_id).collect() };
        let acc = |pick: fn(&crate::LatentCode) -> &Vec<f64>| -> Option<f64> {
            let x = |ks: &[usize]| -> Vec<Vec<f64>> { ks.iter().map(|&k| pick(&test_codes[k]).clone()).collect() };
            if score_i.is_empty() {
                return None;
            }
            let clf = CentroidClassifier::fit(&x(&fit_i), &labels_of(&fit_i));
            Some(clf.accuracy(&x(&score_i), &labels_of(&score_i)))
        };
        (acc(|c| &c.z_shape), acc(|c| &c.z_pose), Some(1.0 / subjects.len() as f64))
    };
    let why = "needs at least two test subjects with even and odd pose indices";
    let acc_shape = nulls.check("subject_probe_acc_from_shape", acc_shape, why);
    let acc_pose = nulls.check("subject_probe_acc_from_pose", acc_pose, why);
    let chance = nulls.check("subject_chance_acc", chance, why);

    // transfer against the generator
    let transfer = {
        let mut rng = counter_rng(opts.seed, tags::EVAL, TRANSFER_STREAM, 0);
        let mut pairs = Vec::new();
        if subjects.len() >= 2 {
            while pairs.len() < opts.transfer_pairs {
                let a = rng.gen_range(0..test_idx.len());
                let b = rng.gen_range(0..test_idx.len());
                if test_labels[a].subject_id != test_labels[b].subject_id {
                    pairs.push((a, b));
                }
            }
        }
        let mut outputs = Vec::with_capacity(pairs.len());
        for &(a, b) in &pairs {
            let z = test_codes[a].swap_pose(&test_codes[b]);
            let oracle = synth::generate_mesh(&test_labels[a].shape, &test_labels[b].pose)?;
            outputs.push((model.decode(&[z])?.remove(0), oracle));
        }
        (!outputs.is_empty())
            .then(|| mean_rmse(outputs.iter().map(|(p, o)| (p.as_slice(), o.vertices()))))
    };
    let transfer = nulls.check(
        "transfer_rmse_vs_oracle",
        transfer,
        "needs two test subjects and a positive pair count",
    );

    // sync
    let sync = if opts.sync_pairs == 0 || opts.sync_frames < 2 {
        None
    } else {
        let last = (opts.sync_frames - 1) as f64;
        let (mut hits, mut total) = (0usize, 0usize);
        for p in 0..opts.sync_pairs {
            let seq_seed: u64 = counter_rng(opts.seed, tags::EVAL, SYNC_STREAM, p as u64).gen();
            let sa = manifest.shape_of(subjects[p % subjects.len()]).expect("test subject has samples");
            let sb = manifest.shape_of(subjects[(p + 1) % subjects.len()]).expect("test subject has samples");
            let a = synth::make_sequence(sa, opts.sync_frames, |t| t, seq_seed)?;
            let b = synth::make_sequence(sb, opts.sync_frames, |t| t * t, seq_seed)?;
            let ra: Vec<&TriangleMesh> = a.iter().map(|(m, _)| m).collect();
            let rb: Vec<&TriangleMesh> = b.iter().map(|(m, _)| m).collect();
            let path = tasks::synchronize(model, &ra, &rb)?;
            for j in 0..opts.sync_frames {
                let matched: Vec<usize> = path.pairs.iter().filter(|q| q.1 == j).map(|q| q.0).collect();
                let predicted = matched.iter().sum::<usize>() as f64 / matched.len() as f64;
                let truth = (last * (j as f64 / last).powi(2)).round();
                if (predicted.round() - truth).abs() <= opts.sync_tolerance as f64 {
                    hits += 1;
                }
                total += 1;
            }
        }
        Some(hits as f64 / total as f64)
    };
    let sync = nulls.check("sync_frame_accuracy", sync, "needs a positive pair count and at least two frames");

    // matching
    let precision = if subjects.len() < 2 {
        None
    } else {
        let mut gallery: BTreeMap<u64, usize> = BTreeMap::new();
        for (k, &i) in test_idx.iter().enumerate() {
            let s = test_labels[k].subject_id;
            let pose = manifest.samples[i].pose_index;
            let e = gallery.entry(s).or_insert(k);
            if pose < manifest.samples[test_idx[*e]].pose_index {
                *e = k;
            }
        }
        let entries: Vec<(Vec<f64>, u64)> = gallery.iter().map(|(&s, &k)| (test_codes[k].z_shape.clone(), s)).collect();
        let in_gallery: Vec<usize> = gallery.values().copied().collect();
        let queries: Vec<usize> = (0..test_idx.len()).filter(|k| !in_gallery.contains(k)).collect();
        let hits = queries
            .iter()
            .filter(|&&k| tasks::rank_codes(&test_codes[k].z_shape, &entries)[0].subject_id == test_labels[k].subject_id)
            .count();
        (!queries.is_empty()).then(|| hits as f64 / queries.len() as f64)
    };
    let precision = nulls.check("match_precision_at_1", precision, "needs two test subjects with several meshes each");

    // sampling
    let (diversity, specificity) = if opts.n_samples == 0 {
        (None, None)
    } else {
        let s = tasks::sample_prior(model, opts.n_samples, opts.seed, &train)?;
        (s.diversity, s.specificity)
    };
    let diversity = nulls.check("sample_diversity", diversity, "needs at least two samples");
    let specificity = nulls.check("sample_specificity", specificity, "needs samples and training meshes");

    Ok(EvalReport {
        schema_version: EVAL_REPORT_VERSION,
        seed: opts.seed,
        n_test_meshes: test.len(),
        recon_rmse,
        val_recon_rmse,
        mean_mesh_baseline_rmse: baseline,
        pose_probe_r2_from_pose: r2_pose,
        pose_probe_r2_from_shape: r2_shape,
        subject_probe_acc_from_shape: acc_shape,
        subject_probe_acc_from_pose: acc_pose,
        subject_chance_acc: chance,
        transfer_rmse_vs_oracle: transfer,
        sync_frame_accuracy: sync,
        match_precision_at_1: precision,
        sample_diversity: diversity,
        sample_specificity: specificity,
        null_reasons: nulls.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_hand_example_without_intercept() {
        let x = vec![vec![1.0], vec![2.0], vec![0.0]];
        let y = vec![vec![1.0], vec![2.0], vec![0.0]];
        let m = ridge_fit(&x, &y, 1e-3, false).unwrap();
        assert!((m.weights[(0, 0)] - 5.0 / (5.0 + 1e-3)).abs() < 1e-12);
        assert_eq!(m.intercept[0], 0.0);
    }

    #[test]
    fn ridge_intercept_is_unpenalized() {
        // y = 2x + 3 exactly; the centered fit recovers the offset
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![2.0 * v[0] + 3.0]).collect();
        let m = ridge_fit(&x, &y, 1e-3, true).unwrap();
        let slope = 2.0 * 10.0 / (10.0 + 1e-3);
        assert!((m.weights[(0, 0)] - slope).abs() < 1e-12);
        assert!((m.intercept[0] - (7.0 - 2.0 * slope)).abs() < 1e-12);
    }

    #[test]
    fn r2_edge_cases() {
        let y = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(r2_score(&y, &y), Some(1.0));
        let mean = vec![vec![2.0]; 3];
        assert_eq!(r2_score(&y, &mean), Some(0.0));
        assert_eq!(r2_score(&vec![vec![4.0]; 3], &y), None);
    }

    #[test]
    fn centroid_ties_go_to_smallest_label() {
        let clf = CentroidClassifier::fit(&[vec![-1.0], vec![1.0]], &[9, 4]);
        assert_eq!(clf.predict(&[0.0]), 4);
        assert_eq!(clf.predict(&[-0.9]), 9);
        assert_eq!(clf.class_count(), 2);
    }
}

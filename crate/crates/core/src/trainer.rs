//! Training loop.
//!
//! Each epoch shuffles the training samples and walks them in batches. Every
//! anchor gets a same-subject partner drawn from its subject's other training
//! poses and a same-pose partner generated on the fly from another training
//! subject's shape in the anchor's pose. All randomness comes from
//! counter-keyed streams `(seed, stream, epoch)`, so a run is a pure function
//! of its inputs when the process is single-threaded.
//!
//! A run directory holds the last checkpoint, `metrics.jsonl`, and the best
//! checkpoint by validation reconstruction RMSE under `best/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape};
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, OptimizerMeta, CHECKPOINT_VERSION};
use crate::dataset::{Dataset, Split};
use crate::hierarchy::{HierarchyError, MeshHierarchy};
use crate::losses::{loss_graph, LabeledMesh, LossTerms, PairedBatch};
use crate::mesh::{vertex_rmse, TriangleMesh};
use crate::model::{MeshVae, ModelConfig, ModelError, Network, Normalization};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::synth::{self, counter_rng, tags, FactorLabels, ShapeParams, SynthError};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_DIR: &str = "best";

/// Subject id given to shapes drawn from the prior when no second training
/// subject exists.
pub const PRIOR_SUBJECT: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0:?} split is empty")]
    EmptySplit(Split),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}: {detail}; the last good checkpoint is kept")]
    NonFinite { epoch: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub swap: f64,
    pub reg: f64,
    pub xcov: f64,
    pub beta: f64,
    pub val_recon_rmse: f64,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    /// RMSE of predicting the mean training mesh for every validation mesh.
    pub baseline_rmse: f64,
    pub best: Checkpoint,
    pub run_dir: PathBuf,
}

/// Mean over pairs of the per-vertex RMSE of each pair; 0 for no pairs.
pub fn mean_rmse<'a>(pairs: impl IntoIterator<Item = (&'a [[f64; 3]], &'a [[f64; 3]])>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in pairs {
        sum += vertex_rmse(a, b);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Vertex-wise mean of a set of same-size meshes.
pub fn mean_vertices(meshes: &[&TriangleMesh]) -> Vec<[f64; 3]> {
    let n = meshes[0].vertex_count();
    let mut out = vec![[0.0; 3]; n];
    for m in meshes {
        for (o, v) in out.iter_mut().zip(m.vertices()) {
            for k in 0..3 {
                o[k] += v[k];
            }
        }
    }
    let c = meshes.len() as f64;
    out.iter_mut().for_each(|o| o.iter_mut().for_each(|x| *x /= c));
    out
}

/// RMSE of always predicting the mean of `train` for every mesh in `eval`.
pub fn mean_mesh_baseline_rmse(train: &[&TriangleMesh], eval: &[&TriangleMesh]) -> f64 {
    let mean = mean_vertices(train);
    mean_rmse(eval.iter().map(|m| (mean.as_slice(), m.vertices())))
}

/// Mean RMSE of `decode(encode-mean(m))` against `m`.
pub fn reconstruction_rmse<T: crate::autograd::Scalar>(model: &MeshVae<T>, meshes: &[&TriangleMesh]) -> Result<f64, ModelError> {
    let codes = model.encode_means(meshes)?;
    let recon = model.decode(&codes)?;
    Ok(mean_rmse(recon.iter().zip(meshes).map(|(r, m)| (r.as_slice(), m.vertices()))))
}

/// Validation meshes, falling back to the training split when the dataset
/// has no validation subjects.
pub fn validation_indices(dataset: &Dataset) -> Vec<usize> {
    let val = dataset.manifest.indices(Split::Val);
    if val.is_empty() {
        dataset.manifest.indices(Split::Train)
    } else {
        val
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn non_finite(epoch: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::NonFinite {
        epoch,
        detail: e.to_string(),
    }
}

struct Partner {
    vertices: Vec<[f64; 3]>,
    labels: FactorLabels,
}

/// Trains a model on the training split of `dataset` and writes the run to
/// `run_dir`. Returns the best checkpoint by validation reconstruction RMSE.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    run_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model_config.validate()?;
    let run_dir = run_dir.as_ref().to_path_buf();
    let manifest = &dataset.manifest;
    let train_idx = manifest.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let val_idx = validation_indices(dataset);
    let train_meshes: Vec<&TriangleMesh> = train_idx.iter().map(|&i| &dataset.meshes[i]).collect();
    let val_meshes: Vec<&TriangleMesh> = val_idx.iter().map(|&i| &dataset.meshes[i]).collect();

    let template = dataset
        .template()
        .with_vertices(mean_vertices(&train_meshes))
        .map_err(ModelError::from)?;
    let hierarchy = Arc::new(MeshHierarchy::build(&template, &model_config.ratios)?);
    let train_verts: Vec<&[[f64; 3]]> = train_meshes.iter().map(|m| m.vertices()).collect();
    let normalization = Normalization::fit(&train_verts);
    let mut model: MeshVae<f32> = MeshVae::init(
        model_config.clone(),
        hierarchy,
        template.shared_faces(),
        normalization,
        &mut counter_rng(seed, tags::INIT, 0, 0),
    )?;
    let mut adam = AdamState::new(config.optimizer, model.params().values());
    let baseline_rmse = mean_mesh_baseline_rmse(&train_meshes, &val_meshes);

    let mut by_subject: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &i in &train_idx {
        by_subject.entry(dataset.labels(i).subject_id).or_default().push(i);
    }
    let subjects: Vec<u64> = by_subject.keys().copied().collect();

    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(io_err(&metrics_path))?;

    let start = Instant::now();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let d = model_config.latent_dim();
    let swap_on = model_config.swap_supervision;

    for epoch in 0..config.epochs {
        let beta = model_config.beta(epoch, config.epochs);
        let mut order = train_idx.clone();
        order.shuffle(&mut counter_rng(seed, tags::ORDER, epoch as u64, 0));
        let mut partner_rng = counter_rng(seed, tags::PARTNER, epoch as u64, 0);
        let mut noise_rng = counter_rng(seed, tags::NOISE, epoch as u64, 0);
        let mut sums = LossTerms::default();
        let mut seen = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut same_subject = Vec::new();
            let mut same_pose: Vec<Partner> = Vec::new();
            if swap_on {
                for &i in chunk {
                    let labels = dataset.labels(i);
                    let own = &by_subject[&labels.subject_id];
                    let others: Vec<usize> = own.iter().copied().filter(|&j| j != i).collect();
                    same_subject.push(if others.is_empty() {
                        i
                    } else {
                        others[partner_rng.gen_range(0..others.len())]
                    });
                    same_pose.push(same_pose_partner(dataset, &by_subject, &subjects, labels, seed, epoch, &mut partner_rng)?);
                }
            }
            let labeled = |i: usize| LabeledMesh {
                vertices: dataset.meshes[i].vertices(),
                labels: dataset.labels(i),
            };
            let batch = PairedBatch {
                anchors: chunk.iter().map(|&i| labeled(i)).collect(),
                same_subject: same_subject.iter().map(|&i| labeled(i)).collect(),
                same_pose: same_pose
                    .iter()
                    .map(|p| LabeledMesh {
                        vertices: &p.vertices,
                        labels: &p.labels,
                    })
                    .collect(),
            };
            let m = batch.meshes().count();
            let noise = Array2::from_shape_simple_fn((m, d), || noise_rng.sample::<f64, _>(StandardNormal) as f32);

            let grads = {
                let tape = Tape::new();
                let net = Network::trainable(&tape, &model)?;
                let graph = match loss_graph(&net, &batch, Some(&noise), beta) {
                    Err(ModelError::Autograd(e @ AutogradError::NonFinite { .. })) => return Err(non_finite(epoch, e)),
                    other => other?,
                };
                if !graph.terms.total.is_finite() {
                    return Err(non_finite(epoch, "total loss"));
                }
                let g = tape.backward(graph.total).map_err(|e| non_finite(epoch, e))?;
                let b = chunk.len() as f64;
                accumulate(&mut sums, &graph.terms, b);
                seen += chunk.len();
                net.vars()
                    .iter()
                    .zip(model.params().values())
                    .map(|(&v, p)| g.get_or_zeros(v, p.dim()))
                    .collect::<Vec<_>>()
            };
            let names = model.params().names().to_vec();
            match adam_step(model.params_mut().values_mut(), &grads, &names, &mut adam) {
                Err(e @ OptimError::NonFinite { .. }) => return Err(non_finite(epoch, e)),
                other => other?,
            }
        }

        let val_recon_rmse = reconstruction_rmse(&model, &val_meshes)?;
        if !val_recon_rmse.is_finite() {
            return Err(non_finite(epoch, "validation reconstruction"));
        }
        let n = seen as f64;
        let record = EpochRecord {
            epoch,
            total: sums.total / n,
            recon: sums.recon / n,
            kl: sums.kl / n,
            swap: sums.swap / n,
            reg: sums.reg / n,
            xcov: sums.xcov / n,
            beta,
            val_recon_rmse,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        log::info!(
            "epoch {epoch}: total {:.5} recon {:.5} kl {:.5} swap {:.5} reg {:.5} xcov {:.5} val_rmse {:.5}",
            record.total,
            record.recon,
            record.kl,
            record.swap,
            record.reg,
            record.xcov,
            val_recon_rmse
        );

        let checkpoint = Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                model: model_config.clone(),
                normalization,
                epoch,
                seed,
                val_recon_rmse: Some(val_recon_rmse),
                optimizer: Some(OptimizerMeta {
                    config: adam.config,
                    step: adam.t,
                }),
            },
            template: template.clone(),
            model: model.clone(),
            optimizer: Some(adam.clone()),
        };
        checkpoint.save(&run_dir)?;
        if best.as_ref().map_or(true, |b| val_recon_rmse < b.1) {
            checkpoint.save(run_dir.join(BEST_DIR))?;
            best = Some((epoch, val_recon_rmse, checkpoint));
        }
        records.push(record);
    }

    let (best_epoch, best_val_rmse, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_rmse,
        baseline_rmse,
        best,
        run_dir,
    })
}

fn accumulate(sums: &mut LossTerms, t: &LossTerms, w: f64) {
    sums.total += w * t.total;
    sums.recon += w * t.recon;
    sums.kl += w * t.kl;
    sums.swap += w * t.swap;
    sums.reg += w * t.reg;
    sums.xcov += w * t.xcov;
}

/// The anchor's pose on another training subject, or on a prior-drawn shape
/// when the training split has a single subject.
fn same_pose_partner(
    dataset: &Dataset,
    by_subject: &BTreeMap<u64, Vec<usize>>,
    subjects: &[u64],
    labels: &FactorLabels,
    seed: u64,
    epoch: usize,
    rng: &mut impl Rng,
) -> Result<Partner, TrainError> {
    let others: Vec<u64> = subjects.iter().copied().filter(|&s| s != labels.subject_id).collect();
    let shape: ShapeParams = if others.is_empty() {
        let draw = rng.gen::<u64>();
        ShapeParams::sample(&mut counter_rng(seed, tags::PRIOR_SHAPE, epoch as u64, draw), PRIOR_SUBJECT)
    } else {
        let s = others[rng.gen_range(0..others.len())];
        dataset.labels(by_subject[&s][0]).shape.clone()
    };
    let mesh = synth::generate_mesh(&shape, &labels.pose)?;
    Ok(Partner {
        vertices: mesh.vertices().to_vec(),
        labels: FactorLabels {
            subject_id: shape.subject_id,
            shape,
            pose: labels.pose.clone(),
            sequence_id: None,
            time_index: None,
            canonical_time: None,
        },
    })
}

/// Reads every record of a `metrics.jsonl` file.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>, TrainError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

//! The mesh VAE: Chebyshev-convolution encoder and decoder over a
//! [`MeshHierarchy`], with a latent code split into shape and pose parts.
//!
//! Vertex data flows through the network batched column-wise, one
//! `N × (B·C)` matrix per level (see [`crate::cheb`]). Between the coarsest
//! level and the dense layers the batch is transposed into one row per mesh.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Scalar, Tape, Var};
use crate::cheb::cheb_conv_tape;
use crate::hierarchy::MeshHierarchy;
use crate::mesh::{Face, MeshError, TriangleMesh};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Meshes per tape during inference.
const INFERENCE_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("missing parameter tensor {0}")]
    MissingParam(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub swap: f64,
    pub reg: f64,
    pub xcov: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kl: 1.0,
            swap: 1.0,
            reg: 0.5,
            xcov: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Decimation ratio per coarser level.
    pub ratios: Vec<f64>,
    /// Encoder output channels per level; the decoder mirrors them.
    pub channels: Vec<usize>,
    /// Chebyshev order per level.
    pub cheb_order: Vec<usize>,
    /// Width of the dense layer on each side of the latent code.
    pub hidden: usize,
    pub latent_shape: usize,
    pub latent_pose: usize,
    pub weights: LossWeights,
    /// Fraction of the epochs over which the KL weight ramps from 0 to 1.
    pub beta_warmup: f64,
    /// Pair-swap supervision.
    pub swap_supervision: bool,
    /// Regression onto normalized factor values.
    pub value_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 0.5],
            channels: vec![16, 32],
            cheb_order: vec![6, 6],
            hidden: 64,
            latent_shape: 8,
            latent_pose: 8,
            weights: LossWeights::default(),
            beta_warmup: 0.2,
            swap_supervision: true,
            value_supervision: true,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_shape + self.latent_pose
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.ratios.is_empty() {
            return bad("at least one hierarchy level is required".into());
        }
        if self.channels.len() != self.ratios.len() || self.cheb_order.len() != self.ratios.len() {
            return bad(format!(
                "ratios, channels and cheb_order must have equal length (got {}, {}, {})",
                self.ratios.len(),
                self.channels.len(),
                self.cheb_order.len()
            ));
        }
        if self.channels.contains(&0) || self.cheb_order.contains(&0) || self.hidden == 0 {
            return bad("channels, cheb_order and hidden must be positive".into());
        }
        if self.latent_shape == 0 || self.latent_pose == 0 {
            return bad("latent_shape and latent_pose must be at least 1".into());
        }
        let w = &self.weights;
        for (name, v) in [("recon", w.recon), ("kl", w.kl), ("swap", w.swap), ("reg", w.reg), ("xcov", w.xcov)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("weight {name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta_warmup) {
            return bad(format!("beta_warmup must lie in [0, 1], got {}", self.beta_warmup));
        }
        Ok(())
    }

    /// KL weight at `epoch` of `total_epochs`, rising linearly from 0.
    pub fn beta(&self, epoch: usize, total_epochs: usize) -> f64 {
        let warm = self.beta_warmup * total_epochs as f64;
        if warm <= 0.0 {
            1.0
        } else {
            (epoch as f64 / warm).min(1.0)
        }
    }
}

/// Diagonal Gaussian over the full latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn clamped_logvar(&self) -> Vec<f64> {
        self.logvar.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect()
    }

    pub fn mean_code(&self, latent_shape: usize) -> LatentCode {
        LatentCode::split(&self.mu, latent_shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z_shape: Vec<f64>,
    pub z_pose: Vec<f64>,
}

impl LatentCode {
    pub fn split(z: &[f64], latent_shape: usize) -> Self {
        let (s, p) = z.split_at(latent_shape.min(z.len()));
        Self {
            z_shape: s.to_vec(),
            z_pose: p.to_vec(),
        }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut z = self.z_shape.clone();
        z.extend_from_slice(&self.z_pose);
        z
    }

    /// Shape part of `self` with the pose part of `other`.
    pub fn swap_pose(&self, other: &LatentCode) -> LatentCode {
        LatentCode {
            z_shape: self.z_shape.clone(),
            z_pose: other.z_pose.clone(),
        }
    }
}

/// `z = mu + exp(logvar/2) ⊙ ε` with the clamped log-variance.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64], latent_shape: usize) -> Result<LatentCode> {
    if noise.len() != post.mu.len() {
        return Err(ModelError::Dimension {
            what: "noise",
            expected: post.mu.len(),
            found: noise.len(),
        });
    }
    let z: Vec<f64> = post
        .mu
        .iter()
        .zip(post.clamped_logvar())
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentCode::split(&z, latent_shape))
}

/// Closed-form `KL(q ‖ N(0, I))`.
pub fn kl_divergence(post: &GaussianPosterior) -> f64 {
    let s: f64 = post
        .mu
        .iter()
        .zip(post.clamped_logvar())
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    // rounding can leave tiny negatives near the prior
    (-0.5 * s).max(0.0)
}

/// Maps mesh positions into the model's input frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    /// Centroid of the mean mesh and RMS distance of all vertices to it.
    pub fn fit(meshes: &[&[[f64; 3]]]) -> Normalization {
        let count = meshes.iter().map(|m| m.len()).sum::<usize>().max(1) as f64;
        let mut center = [0.0; 3];
        for m in meshes {
            for v in m.iter() {
                for k in 0..3 {
                    center[k] += v[k];
                }
            }
        }
        center.iter_mut().for_each(|c| *c /= count);
        let sq: f64 = meshes
            .iter()
            .flat_map(|m| m.iter())
            .map(|v| (0..3).map(|k| (v[k] - center[k]).powi(2)).sum::<f64>())
            .sum();
        let scale = (sq / count).sqrt();
        Normalization {
            center,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        [
            (v[0] - self.center[0]) / self.scale,
            (v[1] - self.center[1]) / self.scale,
            (v[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, v: [f64; 3]) -> [f64; 3] {
        [
            v[0] * self.scale + self.center[0],
            v[1] * self.scale + self.center[1],
            v[2] * self.scale + self.center[2],
        ]
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<T>) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_name(side: &str, level: usize, part: &str) -> String {
    format!("{side}.conv{level}.{part}")
}

/// Channel count entering encoder level `l` (and leaving decoder level `l`).
fn level_input_channels(config: &ModelConfig, l: usize) -> usize {
    if l == 0 {
        3
    } else {
        config.channels[l - 1]
    }
}

/// Every parameter tensor name with its shape, in storage order.
pub fn parameter_layout(config: &ModelConfig, level_sizes: &[usize]) -> Vec<(String, (usize, usize))> {
    let levels = config.channels.len();
    let flat = level_sizes[levels] * config.channels[levels - 1];
    let d = config.latent_dim();
    let h = config.hidden;
    let mut out = Vec::new();
    for l in 0..levels {
        let (k, cin, cout) = (config.cheb_order[l], level_input_channels(config, l), config.channels[l]);
        out.push((conv_name("enc", l, "theta"), (k * cin, cout)));
        out.push((conv_name("enc", l, "bias"), (1, cout)));
    }
    out.push(("enc.hidden.weight".into(), (flat, h)));
    out.push(("enc.hidden.bias".into(), (1, h)));
    out.push(("enc.out.weight".into(), (h, 2 * d)));
    out.push(("enc.out.bias".into(), (1, 2 * d)));
    out.push(("dec.hidden.weight".into(), (d, h)));
    out.push(("dec.hidden.bias".into(), (1, h)));
    out.push(("dec.out.weight".into(), (h, flat)));
    out.push(("dec.out.bias".into(), (1, flat)));
    for l in (0..levels).rev() {
        let (k, cin, cout) = (config.cheb_order[l], config.channels[l], level_input_channels(config, l));
        out.push((conv_name("dec", l, "theta"), (k * cin, cout)));
        out.push((conv_name("dec", l, "bias"), (1, cout)));
    }
    out.push(("head.shape.weight".into(), (config.latent_shape, crate::synth::SHAPE_PARAM_COUNT)));
    out.push(("head.shape.bias".into(), (1, crate::synth::SHAPE_PARAM_COUNT)));
    out.push(("head.pose.weight".into(), (config.latent_pose, crate::synth::JOINTS)));
    out.push(("head.pose.bias".into(), (1, crate::synth::JOINTS)));
    out
}

/// Model parameters together with the fixed operators and input frame.
#[derive(Debug, Clone)]
pub struct MeshVae<T: Scalar> {
    config: ModelConfig,
    hierarchy: Arc<MeshHierarchy>,
    faces: Arc<Vec<Face>>,
    normalization: Normalization,
    params: ParamStore<T>,
}

impl<T: Scalar> MeshVae<T> {
    /// Fresh model. Weights are uniform with variance `1/fan_in`, biases
    /// and the final encoder layer start at zero.
    pub fn init(
        config: ModelConfig,
        hierarchy: Arc<MeshHierarchy>,
        faces: Arc<Vec<Face>>,
        normalization: Normalization,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::check_structure(&config, &hierarchy, &faces)?;
        let mut params = ParamStore::new();
        for (name, (rows, cols)) in parameter_layout(&config, &hierarchy.level_sizes()) {
            let value = if name.ends_with(".bias") || name.starts_with("enc.out.") {
                Array2::zeros((rows, cols))
            } else {
                let a = (3.0 / rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || T::from_f64(rng.gen_range(-a..a)))
            };
            params.push(name, value);
        }
        Ok(Self {
            config,
            hierarchy,
            faces,
            normalization,
            params,
        })
    }

    /// Model from existing tensors; names and shapes must match the layout.
    pub fn from_params(
        config: ModelConfig,
        hierarchy: Arc<MeshHierarchy>,
        faces: Arc<Vec<Face>>,
        normalization: Normalization,
        params: ParamStore<T>,
    ) -> Result<Self> {
        Self::check_structure(&config, &hierarchy, &faces)?;
        let layout = parameter_layout(&config, &hierarchy.level_sizes());
        if layout.len() != params.len() {
            return Err(ModelError::Dimension {
                what: "parameter tensor count",
                expected: layout.len(),
                found: params.len(),
            });
        }
        for ((name, shape), (have, value)) in layout.iter().zip(params.iter()) {
            if name != have {
                return Err(ModelError::MissingParam(name.clone()));
            }
            if value.dim() != *shape {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    value.dim()
                )));
            }
        }
        Ok(Self {
            config,
            hierarchy,
            faces,
            normalization,
            params,
        })
    }

    fn check_structure(config: &ModelConfig, hierarchy: &MeshHierarchy, faces: &[Face]) -> Result<()> {
        config.validate()?;
        if hierarchy.ratios() != config.ratios.as_slice() {
            return Err(ModelError::Config(format!(
                "hierarchy ratios {:?} differ from config ratios {:?}",
                hierarchy.ratios(),
                config.ratios
            )));
        }
        let n = hierarchy.level_sizes()[0];
        if let Some(&bad) = faces.iter().flatten().find(|&&i| i >= n) {
            return Err(ModelError::Dimension {
                what: "template face index bound",
                expected: n,
                found: bad + 1,
            });
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn hierarchy(&self) -> &Arc<MeshHierarchy> {
        &self.hierarchy
    }

    pub fn faces(&self) -> &Arc<Vec<Face>> {
        &self.faces
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn vertex_count(&self) -> usize {
        self.hierarchy.level_sizes()[0]
    }

    /// Normalized vertices of a batch laid out as `N × (B·3)`.
    pub fn pack(&self, meshes: &[&[[f64; 3]]]) -> Result<Array2<T>> {
        let n = self.vertex_count();
        for m in meshes {
            if m.len() != n {
                return Err(ModelError::Dimension {
                    what: "vertex count",
                    expected: n,
                    found: m.len(),
                });
            }
        }
        let mut out = Array2::zeros((n, 3 * meshes.len()));
        for (b, m) in meshes.iter().enumerate() {
            for (i, v) in m.iter().enumerate() {
                let p = self.normalization.apply(*v);
                for k in 0..3 {
                    out[[i, 3 * b + k]] = T::from_f64(p[k]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(&self, x: &Array2<T>) -> Vec<Vec<[f64; 3]>> {
        let batch = x.ncols() / 3;
        (0..batch)
            .map(|b| {
                x.outer_iter()
                    .map(|row| {
                        self.normalization.invert([
                            row[3 * b].to_f64(),
                            row[3 * b + 1].to_f64(),
                            row[3 * b + 2].to_f64(),
                        ])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn encode(&self, meshes: &[&TriangleMesh]) -> Result<Vec<GaussianPosterior>> {
        let verts: Vec<&[[f64; 3]]> = meshes.iter().map(|m| m.vertices()).collect();
        self.encode_vertices(&verts)
    }

    pub fn encode_vertices(&self, meshes: &[&[[f64; 3]]]) -> Result<Vec<GaussianPosterior>> {
        let d = self.config.latent_dim();
        let mut out = Vec::with_capacity(meshes.len());
        for chunk in meshes.chunks(INFERENCE_CHUNK) {
            let tape = Tape::new();
            let net = Network::frozen(&tape, self)?;
            let x = tape.constant(self.pack(chunk)?)?;
            let (mu, logvar) = net.encode(x, chunk.len())?;
            let (mu, logvar) = (tape.value(mu), tape.value(logvar));
            for b in 0..chunk.len() {
                out.push(GaussianPosterior {
                    mu: (0..d).map(|j| mu[[b, j]].to_f64()).collect(),
                    logvar: (0..d).map(|j| logvar[[b, j]].to_f64()).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Posterior means split into shape and pose parts.
    pub fn encode_means(&self, meshes: &[&TriangleMesh]) -> Result<Vec<LatentCode>> {
        let ds = self.config.latent_shape;
        Ok(self.encode(meshes)?.iter().map(|p| p.mean_code(ds)).collect())
    }

    pub fn decode(&self, codes: &[LatentCode]) -> Result<Vec<Vec<[f64; 3]>>> {
        for c in codes {
            self.check_code(c)?;
        }
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(INFERENCE_CHUNK) {
            let tape = Tape::new();
            let net = Network::frozen(&tape, self)?;
            let d = self.config.latent_dim();
            let z = Array2::from_shape_fn((chunk.len(), d), |(b, j)| {
                let c = &chunk[b];
                T::from_f64(if j < c.z_shape.len() {
                    c.z_shape[j]
                } else {
                    c.z_pose[j - c.z_shape.len()]
                })
            });
            let z = tape.constant(z)?;
            let y = net.decode(z, chunk.len())?;
            out.extend(self.unpack(&tape.value(y)));
        }
        Ok(out)
    }

    pub fn decode_meshes(&self, codes: &[LatentCode]) -> Result<Vec<TriangleMesh>> {
        self.decode(codes)?
            .into_iter()
            .map(|v| TriangleMesh::new(v, Arc::clone(&self.faces)).map_err(ModelError::from))
            .collect()
    }

    pub fn check_code(&self, c: &LatentCode) -> Result<()> {
        if c.z_shape.len() != self.config.latent_shape {
            return Err(ModelError::Dimension {
                what: "z_shape",
                expected: self.config.latent_shape,
                found: c.z_shape.len(),
            });
        }
        if c.z_pose.len() != self.config.latent_pose {
            return Err(ModelError::Dimension {
                what: "z_pose",
                expected: self.config.latent_pose,
                found: c.z_pose.len(),
            });
        }
        Ok(())
    }
}

/// The model's parameters bound to tape leaves for one forward pass.
pub struct Network<'a, 't, T: Scalar> {
    tape: &'t Tape<'a, T>,
    model: &'a MeshVae<T>,
    vars: Vec<Var>,
}

impl<'a, 't, T: Scalar> Network<'a, 't, T> {
    /// Parameters as trainable leaves, in [`ParamStore`] order.
    pub fn trainable(tape: &'t Tape<'a, T>, model: &'a MeshVae<T>) -> Result<Self> {
        let vars = model
            .params
            .values()
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { tape, model, vars })
    }

    /// Parameters as constants (no gradients).
    pub fn frozen(tape: &'t Tape<'a, T>, model: &'a MeshVae<T>) -> Result<Self> {
        let vars = model
            .params
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { tape, model, vars })
    }

    /// Caller-created leaves, one per parameter tensor in storage order.
    pub fn with_vars(tape: &'t Tape<'a, T>, model: &'a MeshVae<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(ModelError::Dimension {
                what: "parameter leaves",
                expected: model.params.len(),
                found: vars.len(),
            });
        }
        Ok(Self { tape, model, vars })
    }

    pub fn tape(&self) -> &'t Tape<'a, T> {
        self.tape
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn model(&self) -> &'a MeshVae<T> {
        self.model
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.model
            .params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn affine(&self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = self.var(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    fn conv(&self, x: Var, side: &str, level: usize, batch: usize) -> Result<Var> {
        let theta = self.var(&conv_name(side, level, "theta"))?;
        let bias = self.var(&conv_name(side, level, "bias"))?;
        let lap = self.model.hierarchy.laplacian(level);
        Ok(cheb_conv_tape(
            self.tape,
            x,
            lap,
            theta,
            bias,
            self.model.config.cheb_order[level],
            batch,
        )?)
    }

    /// `x` is `N × (batch·3)` normalized vertices; returns `(mu, logvar)`,
    /// each `batch × d`, with the log-variance already clamped.
    pub fn encode(&self, x: Var, batch: usize) -> Result<(Var, Var)> {
        let t = self.tape;
        let cfg = &self.model.config;
        let n = self.model.vertex_count();
        let shape = t.shape(x);
        if shape != (n, 3 * batch) {
            return Err(ModelError::Dimension {
                what: "encoder input rows",
                expected: n,
                found: shape.0,
            });
        }
        let levels = cfg.channels.len();
        let mut h = x;
        for l in 0..levels {
            h = self.conv(h, "enc", l, batch)?;
            h = t.elu(h)?;
            h = t.sparse_matmul(self.model.hierarchy.downsample(l), h)?;
        }
        let coarse = self.model.hierarchy.level_sizes()[levels];
        let h = t.transpose_blocks(h, coarse, batch, cfg.channels[levels - 1])?;
        let h = self.affine(h, "enc.hidden")?;
        let h = t.elu(h)?;
        let out = self.affine(h, "enc.out")?;
        let d = cfg.latent_dim();
        let mu = t.slice(out, 1, 0, d)?;
        let logvar = t.slice(out, 1, d, 2 * d)?;
        let logvar = t.clamp(logvar, T::from_f64(LOGVAR_MIN), T::from_f64(LOGVAR_MAX))?;
        Ok((mu, logvar))
    }

    /// `z` is `batch × d`; returns `N × (batch·3)` normalized vertices.
    pub fn decode(&self, z: Var, batch: usize) -> Result<Var> {
        let t = self.tape;
        let cfg = &self.model.config;
        let d = cfg.latent_dim();
        let shape = t.shape(z);
        if shape != (batch, d) {
            return Err(ModelError::Dimension {
                what: "latent width",
                expected: d,
                found: shape.1,
            });
        }
        let levels = cfg.channels.len();
        let coarse = self.model.hierarchy.level_sizes()[levels];
        let h = self.affine(z, "dec.hidden")?;
        let h = t.elu(h)?;
        let h = self.affine(h, "dec.out")?;
        let mut h = t.transpose_blocks(h, batch, coarse, cfg.channels[levels - 1])?;
        for l in (0..levels).rev() {
            h = t.sparse_matmul(self.model.hierarchy.upsample(l), h)?;
            h = self.conv(h, "dec", l, batch)?;
            if l > 0 {
                h = t.elu(h)?;
            }
        }
        Ok(h)
    }

    /// Predicted normalized shape parameters from `z_shape` rows.
    pub fn shape_head(&self, z_shape: Var) -> Result<Var> {
        self.affine(z_shape, "head.shape")
    }

    /// Predicted normalized joint angles from `z_pose` rows.
    pub fn pose_head(&self, z_pose: Var) -> Result<Var> {
        self.affine(z_pose, "head.pose")
    }
}

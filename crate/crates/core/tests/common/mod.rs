#![allow(dead_code)]

use std::sync::Arc;

use dismesh_core::autograd::{self, Tape, Var};
use dismesh_core::cheb::cheb_conv_tape;
use dismesh_core::gradcheck::{grad_check, GradCheckReport};
use dismesh_core::losses::{loss_graph, LabeledMesh, PairedBatch};
use dismesh_core::model::{GaussianPosterior, LossWeights, MeshVae, ModelConfig, ModelError, Network, Normalization};
use dismesh_core::synth::{FactorLabels, PoseParams, ShapeParams};
use dismesh_core::{MeshHierarchy, SparseMatrix, TriangleMesh};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// `w × h` grid in the xy-plane with a small deterministic bump in z.
pub fn grid(w: usize, h: usize) -> TriangleMesh {
    let mut v = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let z = 0.1 * ((x * 7 + y * 3) % 5) as f64;
            v.push([x as f64, y as f64, z]);
        }
    }
    let mut f = Vec::new();
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            f.push([i, i + 1, i + w + 1]);
            f.push([i, i + w + 1, i + w]);
        }
    }
    TriangleMesh::new(v, f).unwrap()
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        ratios: vec![0.5],
        channels: vec![4],
        cheb_order: vec![3],
        hidden: 5,
        latent_shape: 2,
        latent_pose: 2,
        weights: LossWeights::default(),
        beta_warmup: 0.2,
        swap_supervision: true,
        value_supervision: true,
    }
}

/// Two-level model on a 16-vertex grid.
pub fn micro_model(seed: u64) -> MeshVae<f64> {
    let mesh = grid(4, 4);
    let h = Arc::new(MeshHierarchy::build(&mesh, &[0.5]).unwrap());
    let norm = Normalization::fit(&[mesh.vertices()]);
    MeshVae::init(micro_config(), h, mesh.shared_faces(), norm, &mut rng(seed)).unwrap()
}

/// Replaces every tensor, including zero-initialized ones, by random values.
pub fn randomize(model: &mut MeshVae<f64>, seed: u64) {
    let mut r = rng(seed);
    for v in model.params_mut().values_mut() {
        v.mapv_inplace(|_| r.gen_range(-0.5..0.5));
    }
}

pub fn labels(subject: u64, pose_seed: u64) -> FactorLabels {
    let shape = ShapeParams::sample(&mut rng(1000 + subject), subject);
    let pose = PoseParams::sample(&mut rng(5000 + pose_seed));
    FactorLabels {
        subject_id: subject,
        shape,
        pose,
        sequence_id: None,
        time_index: None,
        canonical_time: None,
    }
}

pub fn jitter(mesh: &TriangleMesh, amount: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng(seed);
    mesh.vertices()
        .iter()
        .map(|v| [0, 1, 2].map(|k| v[k] + r.gen_range(-amount..amount)))
        .collect()
}

/// Owned storage for a paired micro batch.
pub struct MicroBatch {
    pub verts: Vec<Vec<[f64; 3]>>,
    pub labels: Vec<FactorLabels>,
    pub size: usize,
}

impl MicroBatch {
    /// `b` anchors with partners; anchors are subjects `0..b` in pose `i`.
    pub fn new(b: usize, seed: u64) -> Self {
        let mesh = grid(4, 4);
        let mut verts = Vec::new();
        let mut labels_out = Vec::new();
        for i in 0..b as u64 {
            verts.push(jitter(&mesh, 0.3, seed + i));
            labels_out.push(labels(i, i));
        }
        for i in 0..b as u64 {
            verts.push(jitter(&mesh, 0.3, seed + 100 + i));
            labels_out.push(labels(i, 50 + i));
        }
        for i in 0..b as u64 {
            verts.push(jitter(&mesh, 0.3, seed + 200 + i));
            labels_out.push(labels(100 + i, i));
        }
        Self {
            verts,
            labels: labels_out,
            size: b,
        }
    }

    pub fn batch(&self) -> PairedBatch<'_> {
        let lm = |i: usize| LabeledMesh {
            vertices: &self.verts[i],
            labels: &self.labels[i],
        };
        let b = self.size;
        PairedBatch {
            anchors: (0..b).map(lm).collect(),
            same_subject: (b..2 * b).map(lm).collect(),
            same_pose: (2 * b..3 * b).map(lm).collect(),
        }
    }
}

/// Random undirected graph on `n` vertices, as its scaled Laplacian.
pub fn random_graph_laplacian(n: usize, p: f64, rng: &mut impl Rng) -> SparseMatrix {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let adj = dismesh_core::graph::adjacency(n, &edges);
    dismesh_core::graph::scaled_laplacian_from_adjacency(&adj)
}

/// `Σ_k U·T_k(Λ)·Uᵀ·x·θ_k + b` through a dense eigendecomposition, with
/// `T_k(λ) = cos(k·arccos λ)`.
pub fn spectral_filter(lap: &SparseMatrix, x: &Array2<f64>, theta: &Array2<f64>, bias: &Array2<f64>, order: usize) -> Array2<f64> {
    let n = lap.rows();
    let dense = lap.to_dense();
    let m = DMatrix::from_fn(n, n, |i, j| dense[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let u = &eig.eigenvectors;
    let xm = DMatrix::from_fn(n, x.ncols(), |i, j| x[[i, j]]);
    let c_in = x.ncols();
    let c_out = theta.ncols();
    let mut y = DMatrix::from_fn(n, c_out, |_, j| bias[[0, j]]);
    for k in 0..order {
        let diag: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| (k as f64 * l.clamp(-1.0, 1.0).acos()).cos())
            .collect();
        let filter = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * u.transpose();
        let th = DMatrix::from_fn(c_in, c_out, |i, j| theta[[k * c_in + i, j]]);
        y += filter * &xm * th;
    }
    Array2::from_shape_fn((n, c_out), |(i, j)| y[(i, j)])
}

/// Inputs in `[-1, 1]` pushed at least `margin` away from every point in `kinks`.
fn away_from(rows: usize, cols: usize, kinks: &[f64], margin: f64, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = r.gen_range(-1.0..1.0);
        if kinks.iter().all(|k| (v - k).abs() >= margin) {
            return v;
        }
    })
}

type OpCase = (&'static str, Vec<Array2<f64>>, Box<dyn for<'t> Fn(&Tape<'t, f64>, &[Var]) -> autograd::Result<Var>>);

/// Central-difference report for every differentiable tape op, each reduced
/// to a scalar through a fixed random weighting of its output.
pub fn op_grad_suite(h: f64, tol: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(77);
    let lap: &'static SparseMatrix = Box::leak(Box::new(random_graph_laplacian(5, 0.6, &mut r)));
    let a = random_array(5, 3, &mut r);
    let b = random_array(5, 3, &mut r);
    let row = random_array(1, 3, &mut r);
    let m = random_array(3, 4, &mut r);
    let pos = a.mapv(|v| v.abs() + 0.2);
    let kinked = away_from(5, 3, &[0.0, -0.5, 0.5], 0.05, &mut r);
    let blocks = random_array(2, 12, &mut r);
    let theta = random_array(3 * 3, 2, &mut r);
    let bias = random_array(1, 2, &mut r);
    let batched = random_array(5, 6, &mut r);

    let cases: Vec<OpCase> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("matmul", vec![a.clone(), m.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("sparse_matmul", vec![a.clone()], Box::new(move |t, v| t.sparse_matmul(lap, v[0]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("elu", vec![a.clone()], Box::new(|t, v| t.elu(v[0]))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![pos], Box::new(|t, v| t.log(v[0]))),
        ("abs", vec![kinked.clone()], Box::new(|t, v| t.abs(v[0]))),
        ("square", vec![a.clone()], Box::new(|t, v| t.square(v[0]))),
        ("clamp", vec![kinked], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], 3, 5))),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat_cols", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 0, 1, 4))),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("mean_rows", vec![a.clone()], Box::new(|t, v| t.mean_rows(v[0]))),
        ("transpose_blocks", vec![blocks], Box::new(|t, v| t.transpose_blocks(v[0], 2, 3, 4))),
        (
            "custom_unary",
            vec![a.clone()],
            Box::new(|t, v| {
                t.custom_unary(
                    "sin",
                    v[0],
                    |x| x.mapv(f64::sin),
                    |x, _, g| {
                        let mut out = x.mapv(f64::cos);
                        out *= &g;
                        out
                    },
                )
            }),
        ),
        (
            "cheb_conv",
            vec![batched, theta, bias],
            Box::new(move |t, v| cheb_conv_tape(t, v[0], lap, v[1], v[2], 3, 2)),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, op)| {
            let f = |t: &_, v: &[Var]| -> autograd::Result<Var> {
                let y = op(t, v)?;
                let (rows, cols) = t.shape(y);
                let w = t.constant(random_array(rows, cols, &mut rng(rows as u64 * 31 + cols as u64)))?;
                t.sum(t.mul(y, w)?)
            };
            (name, grad_check(f, &inputs, h, tol).expect("op evaluates"))
        })
        .collect()
}

/// Central-difference report of the full training loss of a randomized
/// micro-model with respect to every parameter tensor.
pub fn total_loss_grad_report(h: f64, tol: f64) -> (Vec<String>, GradCheckReport) {
    let mut model = micro_model(5);
    randomize(&mut model, 12);
    let mb = MicroBatch::new(2, 80);
    let noise = random_array(6, 4, &mut rng(13));
    let inputs: Vec<Array2<f64>> = model.params().values().to_vec();
    let model = &model;
    let batch = mb.batch();
    let f = |tape: &_, vars: &[Var]| -> Result<Var, ModelError> {
        let net = Network::with_vars(tape, model, vars.to_vec())?;
        Ok(loss_graph(&net, &batch, Some(&noise), 0.7)?.total)
    };
    let report = grad_check(f, &inputs, h, tol).expect("loss evaluates");
    (model.params().names().to_vec(), report)
}

/// `E_q[log q(z) − log p(z)]` by sampling `z` from `q`.
pub fn monte_carlo_kl(post: &GaussianPosterior, draws: usize, r: &mut impl Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut s = 0.0;
        for (m, lv) in post.mu.iter().zip(&post.logvar) {
            let e: f64 = r.sample(StandardNormal);
            let z = m + (0.5 * lv).exp() * e;
            // log q − log p, constants cancel
            s += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += s;
    }
    acc / draws as f64
}

/// Minimum path cost over every monotone path, by exhaustive recursion.
pub fn brute_force_cost(d: &[Vec<f64>]) -> f64 {
    fn walk(d: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let here = d[i][j];
        let (n, m) = (d.len(), d[0].len());
        if i == n - 1 && j == m - 1 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < n {
            best = best.min(walk(d, i + 1, j));
        }
        if j + 1 < m {
            best = best.min(walk(d, i, j + 1));
        }
        if i + 1 < n && j + 1 < m {
            best = best.min(walk(d, i + 1, j + 1));
        }
        here + best
    }
    walk(d, 0, 0)
}

pub fn random_seq(len: usize, dim: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

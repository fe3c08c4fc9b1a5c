//! Training objective: reconstruction, KL, and the disentanglement terms.
//!
//! A [`PairedBatch`] holds `B` anchors `X`, a same-subject partner `Y` per
//! anchor (same shape, other pose) and a same-pose partner `W` (other
//! subject, identical pose). All `3B` meshes are encoded in one pass; the
//! sampled codes and the `2B` swapped codes are decoded in a second.
//!
//! Term conventions:
//! * `recon`, `swap`: per-vertex L1, the xyz absolute errors summed and
//!   averaged over vertices and meshes;
//! * `kl`: the closed-form KL to the prior averaged over meshes and divided
//!   by the vertex count, so it sits on the same per-vertex footing as
//!   `recon`;
//! * `reg`: mean of the shape-head and pose-head mean squared errors;
//! * `xcov`: `‖C‖²_F / M` where `C` is the cross-covariance of the centered
//!   posterior means of `z_shape` and `z_pose` over all `M` encoded meshes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::model::{MeshVae, ModelError, Network, Result};
use crate::synth::FactorLabels;

#[derive(Debug, Clone, Copy)]
pub struct LabeledMesh<'m> {
    pub vertices: &'m [[f64; 3]],
    pub labels: &'m FactorLabels,
}

#[derive(Debug, Clone, Default)]
pub struct PairedBatch<'m> {
    pub anchors: Vec<LabeledMesh<'m>>,
    /// Same subject as the anchor at the same index, different pose.
    pub same_subject: Vec<LabeledMesh<'m>>,
    /// Same pose as the anchor at the same index, different subject.
    pub same_pose: Vec<LabeledMesh<'m>>,
}

impl<'m> PairedBatch<'m> {
    pub fn size(&self) -> usize {
        self.anchors.len()
    }

    /// All meshes in encoding order: anchors, same-subject, same-pose.
    pub fn meshes(&self) -> impl Iterator<Item = &LabeledMesh<'m>> {
        self.anchors.iter().chain(&self.same_subject).chain(&self.same_pose)
    }

    fn has_pairs(&self) -> bool {
        !self.same_subject.is_empty() || !self.same_pose.is_empty()
    }

    /// Checks the pairing contract. Pairs are required when `need_pairs`.
    pub fn validate(&self, need_pairs: bool) -> Result<()> {
        let bad = |m: String| Err(ModelError::Batch(m));
        let b = self.anchors.len();
        if b == 0 {
            return bad("batch has no anchors".into());
        }
        if !need_pairs && !self.has_pairs() {
            return Ok(());
        }
        if self.same_subject.len() != b || self.same_pose.len() != b {
            return bad(format!(
                "batch needs one same-subject and one same-pose partner per anchor ({} anchors, {} and {} partners)",
                b,
                self.same_subject.len(),
                self.same_pose.len()
            ));
        }
        for i in 0..b {
            let (a, s, p) = (self.anchors[i].labels, self.same_subject[i].labels, self.same_pose[i].labels);
            if s.subject_id != a.subject_id {
                return bad(format!("same-subject partner {i} has subject {} instead of {}", s.subject_id, a.subject_id));
            }
            if p.pose != a.pose {
                return bad(format!("same-pose partner {i} does not share the anchor's pose"));
            }
            if p.subject_id == a.subject_id {
                return bad(format!("same-pose partner {i} is from the anchor's own subject"));
            }
        }
        Ok(())
    }
}

/// Every loss term of one batch, in `f64`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub swap: f64,
    pub reg: f64,
    pub xcov: f64,
    pub beta: f64,
}

impl LossTerms {
    /// Weighted sum of the terms under `weights` and `self.beta`.
    pub fn weighted_sum(&self, weights: &crate::model::LossWeights) -> f64 {
        weights.recon * self.recon
            + weights.kl * self.beta * self.kl
            + weights.swap * self.swap
            + weights.reg * self.reg
            + weights.xcov * self.xcov
    }
}

/// Loss graph on a tape: the `1×1` total and the recorded terms.
pub struct LossGraph {
    pub total: Var,
    pub terms: LossTerms,
}

fn scalar_const<T: Scalar>(tape: &Tape<'_, T>, v: f64) -> Result<Var> {
    Ok(tape.constant(Array2::from_elem((1, 1), T::from_f64(v)))?)
}

/// Per-vertex L1 between two `N × (B·3)` matrices.
fn vertex_l1<T: Scalar>(tape: &Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    let mean = tape.mean(abs)?;
    Ok(tape.scale(mean, T::from_f64(3.0))?)
}

fn center_rows<T: Scalar>(tape: &Tape<'_, T>, x: Var) -> Result<Var> {
    let m = tape.mean_rows(x)?;
    let neg = tape.scale(m, T::from_f64(-1.0))?;
    Ok(tape.add_row(x, neg)?)
}

/// `‖C‖²_F / M` for the centered cross-covariance `C` of `zs` and `zp` rows.
pub fn xcov_graph<T: Scalar>(tape: &Tape<'_, T>, zs: Var, zp: Var) -> Result<Var> {
    let m = tape.shape(zs).0 as f64;
    let cs = center_rows(tape, zs)?;
    let cp = center_rows(tape, zp)?;
    let cst = tape.transpose(cs)?;
    let c = tape.matmul(cst, cp)?;
    let c = tape.scale(c, T::from_f64(1.0 / m))?;
    let sq = tape.square(c)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, T::from_f64(1.0 / m))?)
}

fn targets<T: Scalar>(batch: &PairedBatch<'_>, f: impl Fn(&FactorLabels) -> Vec<f64>) -> Array2<T> {
    let rows: Vec<Vec<f64>> = batch.meshes().map(|m| f(m.labels)).collect();
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| T::from_f64(rows[i][j]))
}

/// Builds the objective on `net`'s tape.
///
/// `noise` is `M × d` standard-normal draws for the reparameterized
/// reconstruction codes, `M` being the number of meshes in the batch; `None`
/// uses the posterior means.
pub fn loss_graph<T: Scalar>(
    net: &Network<'_, '_, T>,
    batch: &PairedBatch<'_>,
    noise: Option<&Array2<T>>,
    beta: f64,
) -> Result<LossGraph> {
    let model = net.model();
    let cfg = model.config();
    let swap_on = cfg.swap_supervision;
    batch.validate(swap_on)?;
    let t = net.tape();
    let b = batch.size();
    let verts: Vec<&[[f64; 3]]> = batch.meshes().map(|m| m.vertices).collect();
    let m = verts.len();
    let n = model.vertex_count();
    let (ds, d) = (cfg.latent_shape, cfg.latent_dim());

    let x = t.constant(model.pack(&verts)?)?;
    let (mu, logvar) = net.encode(x, m)?;

    let z = match noise {
        Some(eps) => {
            if eps.dim() != (m, d) {
                return Err(ModelError::Dimension {
                    what: "noise rows",
                    expected: m,
                    found: eps.nrows(),
                });
            }
            let eps = t.constant(eps.clone())?;
            let half = t.scale(logvar, T::from_f64(0.5))?;
            let std = t.exp(half)?;
            let spread = t.mul(std, eps)?;
            t.add(mu, spread)?
        }
        None => mu,
    };

    let zs = t.slice(mu, 1, 0, ds)?;
    let zp = t.slice(mu, 1, ds, d)?;
    let (decoded_rows, z_dec) = if swap_on {
        let zs_x = t.slice(zs, 0, 0, b)?;
        let zp_y = t.slice(zp, 0, b, 2 * b)?;
        let zp_w = t.slice(zp, 0, 2 * b, 3 * b)?;
        let to_y = t.concat(&[zs_x, zp_y], 1)?;
        let to_x = t.concat(&[zs_x, zp_w], 1)?;
        (m + 2 * b, t.concat(&[z, to_y, to_x], 0)?)
    } else {
        (m, z)
    };
    let y = net.decode(z_dec, decoded_rows)?;

    let recon_out = t.slice(y, 1, 0, 3 * m)?;
    let recon = vertex_l1(t, recon_out, x)?;

    let swap = if swap_on {
        let out = t.slice(y, 1, 3 * m, 3 * (m + 2 * b))?;
        let target_y = t.slice(x, 1, 3 * b, 6 * b)?;
        let target_x = t.slice(x, 1, 0, 3 * b)?;
        let target = t.concat(&[target_y, target_x], 1)?;
        Some(vertex_l1(t, out, target)?)
    } else {
        None
    };

    // KL = ½ Σ (exp(lv) + mu² − lv − 1), averaged over meshes, per vertex
    let e = t.exp(logvar)?;
    let e = t.sub(e, logvar)?;
    let mu2 = t.square(mu)?;
    let e = t.add(e, mu2)?;
    let s = t.sum(e)?;
    let offset = scalar_const(t, (m * d) as f64)?;
    let s = t.sub(s, offset)?;
    let kl = t.scale(s, T::from_f64(0.5 / (m as f64 * n as f64)))?;

    let reg = if cfg.value_supervision {
        let ps = net.shape_head(zs)?;
        let pp = net.pose_head(zp)?;
        let ts = t.constant(targets::<T>(batch, |l| l.shape.normalized()))?;
        let tp = t.constant(targets::<T>(batch, |l| l.pose.normalized()))?;
        let es = t.sub(ps, ts)?;
        let es = t.square(es)?;
        let es = t.mean(es)?;
        let ep = t.sub(pp, tp)?;
        let ep = t.square(ep)?;
        let ep = t.mean(ep)?;
        let r = t.add(es, ep)?;
        Some(t.scale(r, T::from_f64(0.5))?)
    } else {
        None
    };

    let xcov = xcov_graph(t, zs, zp)?;

    let w = &cfg.weights;
    let mut parts = vec![t.scale(recon, T::from_f64(w.recon))?, t.scale(kl, T::from_f64(w.kl * beta))?];
    if let Some(s) = swap {
        parts.push(t.scale(s, T::from_f64(w.swap))?);
    }
    if let Some(r) = reg {
        parts.push(t.scale(r, T::from_f64(w.reg))?);
    }
    parts.push(t.scale(xcov, T::from_f64(w.xcov))?);
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = t.add(total, p)?;
    }

    let read = |v: Option<Var>| v.map_or(0.0, |v| t.scalar(v).to_f64());
    let terms = LossTerms {
        total: t.scalar(total).to_f64(),
        recon: read(Some(recon)),
        kl: read(Some(kl)).max(0.0),
        swap: read(swap),
        reg: read(reg),
        xcov: read(Some(xcov)),
        beta,
    };
    Ok(LossGraph { total, terms })
}

/// The weighted objective for one batch at `epoch` of `total_epochs`,
/// evaluated without building gradients.
pub fn total_loss<T: Scalar>(
    batch: &PairedBatch<'_>,
    model: &MeshVae<T>,
    epoch: usize,
    total_epochs: usize,
    noise: Option<&Array2<T>>,
) -> Result<LossTerms> {
    let tape = Tape::new();
    let net = Network::frozen(&tape, model)?;
    let beta = model.config().beta(epoch, total_epochs);
    Ok(loss_graph(&net, batch, noise, beta)?.terms)
}

/// `(swap, reg, xcov)` at the posterior means.
pub fn disentangle_losses<T: Scalar>(model: &MeshVae<T>, batch: &PairedBatch<'_>) -> Result<(f64, f64, f64)> {
    let t = total_loss(batch, model, 0, 1, None)?;
    Ok((t.swap, t.reg, t.xcov))
}

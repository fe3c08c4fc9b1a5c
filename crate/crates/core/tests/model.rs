mod common;

use common::*;
use dismesh_core::autograd::Tape;
use dismesh_core::cheb::{cheb_conv, ChebLayerParams};
use dismesh_core::losses::{disentangle_losses, total_loss, xcov_graph};
use dismesh_core::model::{
    kl_divergence, reparameterize, GaussianPosterior, LatentCode, LossWeights, MeshVae, ModelError,
};
use dismesh_core::SparseMatrix;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn cheb_conv_matches_spectral_filter() {
    let mut r = rng(11);
    for _ in 0..50 {
        let n = r.gen_range(2..=12);
        let order = r.gen_range(1..=6);
        let (c_in, c_out) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let lap = random_graph_laplacian(n, 0.4, &mut r);
        let x = random_array(n, c_in, &mut r);
        let p = ChebLayerParams {
            theta: random_array(order * c_in, c_out, &mut r),
            bias: random_array(1, c_out, &mut r),
            order,
        };
        let y = cheb_conv(&x, &lap, &p).unwrap();
        let oracle = spectral_filter(&lap, &x, &p.theta, &p.bias, order);
        let err = (&y - &oracle).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 1e-6, "n={n} K={order}: {err}");
    }
}

fn permuted(lap: &SparseMatrix, perm: &[usize]) -> SparseMatrix {
    let t: Vec<_> = lap.entries().iter().map(|&(i, j, v)| (perm[i], perm[j], v)).collect();
    SparseMatrix::from_triplets(lap.rows(), lap.cols(), t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cheb_conv_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..10, order in 1usize..6) {
        let mut r = rng(seed);
        let lap = random_graph_laplacian(n, 0.5, &mut r);
        let x = random_array(n, 2, &mut r);
        let p = ChebLayerParams { theta: random_array(order * 2, 3, &mut r), bias: random_array(1, 3, &mut r), order };
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let mut px = Array2::zeros(x.dim());
        for i in 0..n {
            px.row_mut(perm[i]).assign(&x.row(i));
        }
        let y = cheb_conv(&x, &lap, &p).unwrap();
        let py = cheb_conv(&px, &permuted(&lap, &perm), &p).unwrap();
        for i in 0..n {
            for j in 0..3 {
                prop_assert!((py[[perm[i], j]] - y[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn latent_split_round_trips(z in prop::collection::vec(-5.0f64..5.0, 2..20), cut in 1usize..19) {
        let cut = cut.min(z.len() - 1);
        let code = LatentCode::split(&z, cut);
        prop_assert_eq!(code.z_shape.len(), cut);
        prop_assert_eq!(code.concat(), z);
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 1..10), seed in 0u64..1000) {
        let mut r = rng(seed);
        let logvar = mu.iter().map(|_| r.gen_range(-12.0..12.0)).collect();
        let post = GaussianPosterior { mu, logvar };
        prop_assert!(kl_divergence(&post) >= 0.0);
    }
}

#[test]
fn kl_zero_only_at_prior() {
    let zero = GaussianPosterior { mu: vec![0.0; 4], logvar: vec![0.0; 4] };
    assert!(kl_divergence(&zero) <= 1e-12);
    let grid = [-1.0, -1e-3, 0.0, 1e-3, 1.0];
    for &m in &grid {
        for &lv in &grid {
            let kl = kl_divergence(&GaussianPosterior { mu: vec![m, 0.0], logvar: vec![lv, 0.0] });
            if m == 0.0 && lv == 0.0 {
                assert!(kl <= 1e-12);
            } else {
                assert!(kl > 1e-12, "mu={m} logvar={lv} gave {kl}");
            }
        }
    }
}

#[test]
fn kl_one_dimensional_hand_value() {
    let p = GaussianPosterior { mu: vec![1.0], logvar: vec![0.0] };
    assert!((kl_divergence(&p) - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(21);
    let post = GaussianPosterior {
        mu: (0..8).map(|_| r.gen_range(-1.0..1.0)).collect(),
        logvar: (0..8).map(|_| r.gen_range(-1.0..1.0)).collect(),
    };
    let closed = kl_divergence(&post);
    let mc = monte_carlo_kl(&post, 1_000_000, &mut r);
    assert!((closed - mc).abs() <= 1e-2, "{closed} vs {mc}");
}

#[test]
fn reparameterize_cases() {
    let post = GaussianPosterior { mu: vec![0.5, -1.0, 2.0], logvar: vec![0.3, 0.0, -2.0] };
    assert_eq!(reparameterize(&post, &[0.0; 3], 1).unwrap().concat(), post.mu);
    let unit = GaussianPosterior { mu: vec![0.5, -1.0, 2.0], logvar: vec![0.0; 3] };
    let z = reparameterize(&unit, &[0.0, 1.0, 0.0], 1).unwrap();
    assert_eq!(z.z_shape, vec![0.5]);
    assert_eq!(z.z_pose, vec![0.0, 2.0]);
    assert!(matches!(reparameterize(&post, &[0.0; 2], 1), Err(ModelError::Dimension { what: "noise", .. })));
}

#[test]
fn reparameterized_mean_converges() {
    let post = GaussianPosterior { mu: vec![0.7, -0.2], logvar: vec![0.5, -1.5] };
    let mut r = rng(5);
    let draws = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..draws {
        let eps: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
        let z = reparameterize(&post, &eps, 1).unwrap().concat();
        sum[0] += z[0];
        sum[1] += z[1];
    }
    for k in 0..2 {
        let sigma = (0.5 * post.logvar[k]).exp();
        let mean = sum[k] / draws as f64;
        assert!((mean - post.mu[k]).abs() <= 3.0 * sigma / (draws as f64).sqrt());
    }
}

#[test]
fn zero_input_gives_zero_posterior() {
    let mut model = micro_model(1);
    // identity frame so that zero positions reach the network as zeros
    model = MeshVae::from_params(
        model.config().clone(),
        model.hierarchy().clone(),
        model.faces().clone(),
        dismesh_core::model::Normalization::IDENTITY,
        model.params().clone(),
    )
    .unwrap();
    let zeros = vec![[0.0; 3]; 16];
    let post = model.encode_vertices(&[&zeros]).unwrap();
    assert!(post[0].mu.iter().chain(&post[0].logvar).all(|&v| v == 0.0));
}

#[test]
fn encode_and_decode_are_deterministic() {
    let mut model = micro_model(2);
    randomize(&mut model, 3);
    let v = jitter(&grid(4, 4), 0.2, 4);
    assert_eq!(model.encode_vertices(&[&v]).unwrap(), model.encode_vertices(&[&v]).unwrap());
    let code = LatentCode { z_shape: vec![0.3, -0.1], z_pose: vec![1.0, 0.0] };
    let a = model.decode(std::slice::from_ref(&code)).unwrap();
    let b = model.decode(std::slice::from_ref(&code)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_encoding_matches_single() {
    let mut model = micro_model(2);
    randomize(&mut model, 8);
    let vs: Vec<_> = (0..40).map(|i| jitter(&grid(4, 4), 0.2, i)).collect();
    let refs: Vec<&[[f64; 3]]> = vs.iter().map(|v| v.as_slice()).collect();
    let all = model.encode_vertices(&refs).unwrap();
    for (i, v) in vs.iter().enumerate().step_by(7) {
        let one = model.encode_vertices(&[v]).unwrap();
        for (a, b) in one[0].mu.iter().zip(&all[i].mu) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_contract_over_config_grid() {
    use dismesh_core::model::Normalization;
    use dismesh_core::MeshHierarchy;
    use std::sync::Arc;
    let mesh = grid(6, 6);
    for (ratios, channels, order) in [
        (vec![0.5], vec![3], vec![1]),
        (vec![0.5, 0.6], vec![2, 5], vec![2, 4]),
        (vec![0.7, 0.6], vec![4, 4], vec![6, 3]),
    ] {
        for (ds, dp) in [(1, 1), (3, 2), (2, 5)] {
            let cfg = dismesh_core::ModelConfig {
                ratios: ratios.clone(),
                channels: channels.clone(),
                cheb_order: order.clone(),
                hidden: 7,
                latent_shape: ds,
                latent_pose: dp,
                ..micro_config()
            };
            let h = Arc::new(MeshHierarchy::build(&mesh, &ratios).unwrap());
            let m: MeshVae<f64> =
                MeshVae::init(cfg, h, mesh.shared_faces(), Normalization::fit(&[mesh.vertices()]), &mut rng(0)).unwrap();
            let post = m.encode(&[&mesh]).unwrap();
            assert_eq!(post[0].mu.len(), ds + dp);
            assert_eq!(post[0].logvar.len(), ds + dp);
            let out = m.decode(&[post[0].mean_code(ds)]).unwrap();
            assert_eq!(out[0].len(), 36);
        }
    }
}

#[test]
fn rejects_bad_dimensions_and_configs() {
    let model = micro_model(0);
    let short = vec![[0.0; 3]; 15];
    assert!(matches!(model.encode_vertices(&[&short]), Err(ModelError::Dimension { what: "vertex count", .. })));
    let bad = LatentCode { z_shape: vec![0.0; 3], z_pose: vec![0.0; 2] };
    assert!(matches!(model.decode(&[bad]), Err(ModelError::Dimension { what: "z_shape", .. })));
    let bad = LatentCode { z_shape: vec![0.0; 2], z_pose: vec![0.0; 1] };
    assert!(matches!(model.decode(&[bad]), Err(ModelError::Dimension { what: "z_pose", .. })));

    let mut cfg = micro_config();
    cfg.channels = vec![4, 4];
    assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    let mut cfg = micro_config();
    cfg.weights.swap = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn swap_with_identical_partner_is_reconstruction() {
    let mut model = micro_model(3);
    randomize(&mut model, 9);
    let mb = MicroBatch::new(2, 40);
    let mut batch = mb.batch();
    // partners share the anchor's vertices
    for i in 0..2 {
        batch.same_subject[i].vertices = batch.anchors[i].vertices;
        batch.same_pose[i].vertices = batch.anchors[i].vertices;
    }
    let (swap, _, _) = disentangle_losses(&model, &batch).unwrap();

    let codes: Vec<LatentCode> = {
        let v: Vec<&[[f64; 3]]> = batch.anchors.iter().map(|m| m.vertices).collect();
        model.encode_vertices(&v).unwrap().iter().map(|p| p.mean_code(2)).collect()
    };
    let decoded = model.decode(&codes).unwrap();
    let norm = model.normalization();
    let mut l1 = 0.0;
    for (out, m) in decoded.iter().zip(&batch.anchors) {
        for (a, b) in out.iter().zip(m.vertices) {
            l1 += (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / norm.scale;
        }
    }
    let recon = l1 / (2.0 * 16.0);
    assert!((swap - recon).abs() < 1e-9, "{swap} vs {recon}");
}

#[test]
fn xcov_cases() {
    let tape: Tape<'_, f64> = Tape::new();
    let zs = tape.constant(array![[1.0], [-1.0]]).unwrap();
    let zp = tape.constant(array![[1.0], [-1.0]]).unwrap();
    let x = xcov_graph(&tape, zs, zp).unwrap();
    assert!((tape.scalar(x) - 0.5).abs() < 1e-15);

    let zs = tape.constant(random_array(6, 3, &mut rng(1))).unwrap();
    let zp = tape.constant(Array2::from_elem((6, 2), 0.7)).unwrap();
    let x = xcov_graph(&tape, zs, zp).unwrap();
    assert!(tape.scalar(x).abs() < 1e-15);
}

#[test]
fn total_loss_bookkeeping() {
    let mut model = micro_model(4);
    randomize(&mut model, 10);
    let mb = MicroBatch::new(3, 60);
    let batch = mb.batch();
    let noise = random_array(9, 4, &mut rng(7));

    let t = total_loss(&batch, &model, 5, 10, Some(&noise)).unwrap();
    assert_eq!(t.beta, 1.0);
    for v in [t.recon, t.kl, t.swap, t.reg, t.xcov] {
        assert!(v >= 0.0);
    }
    let sum = t.weighted_sum(&model.config().weights);
    assert!((sum - t.total).abs() <= 1e-6 * t.total.abs());

    let t0 = total_loss(&batch, &model, 0, 10, Some(&noise)).unwrap();
    assert_eq!(t0.beta, 0.0);
    let without_kl = t0.recon + 1.0 * t0.swap + 0.5 * t0.reg + 0.1 * t0.xcov;
    assert!((t0.total - without_kl).abs() <= 1e-12 * t0.total);
    assert!(t0.kl > 0.0);

    let mut recon_only = model.clone();
    let mut cfg = recon_only.config().clone();
    cfg.weights = LossWeights { recon: 1.0, kl: 0.0, swap: 0.0, reg: 0.0, xcov: 0.0 };
    recon_only = MeshVae::from_params(
        cfg,
        recon_only.hierarchy().clone(),
        recon_only.faces().clone(),
        recon_only.normalization(),
        recon_only.params().clone(),
    )
    .unwrap();
    let r = total_loss(&batch, &recon_only, 5, 10, Some(&noise)).unwrap();
    assert_eq!(r.total, r.recon);
}

#[test]
fn batch_without_pairs_is_rejected() {
    let model = micro_model(0);
    let mb = MicroBatch::new(2, 0);
    let mut batch = mb.batch();
    batch.same_pose.clear();
    assert!(matches!(total_loss(&batch, &model, 0, 1, None), Err(ModelError::Batch(_))));
    let mut batch = mb.batch();
    batch.same_subject.swap(0, 1);
    assert!(matches!(total_loss(&batch, &model, 0, 1, None), Err(ModelError::Batch(_))));
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let (names, report) = total_loss_grad_report(1e-6, 1e-4);
    for (name, r) in names.iter().zip(&report.inputs) {
        assert!(r.max_rel_error <= 1e-4, "{name}: {r:?}");
    }
    assert!(report.passed);
}

mod common;

use common::{brute_force_cost, grid, jitter, micro_model, random_seq, randomize, rng};
use dismesh_core::mesh::vertex_rmse;
use dismesh_core::tasks::{self, dtw, dtw_from_costs, TaskError};
use dismesh_core::TriangleMesh;
use proptest::prelude::*;

fn path_cost(a: &[Vec<f64>], b: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| tasks::euclidean(&a[i], &b[j])).sum()
}

fn assert_valid_path(pairs: &[(usize, usize)], n: usize, m: usize) {
    assert_eq!(pairs[0], (0, 0));
    assert_eq!(*pairs.last().unwrap(), (n - 1, m - 1));
    for w in pairs.windows(2) {
        let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)), "bad step {w:?}");
    }
}

#[test]
fn dtw_matches_brute_force_on_all_small_sizes() {
    let mut r = rng(11);
    let mut instances = 0;
    for n in 1..=6 {
        for m in 1..=6 {
            for _ in 0..3 {
                let a = random_seq(n, 3, &mut r);
                let b = random_seq(m, 3, &mut r);
                let d: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| tasks::euclidean(x, y)).collect()).collect();
                let p = dtw(&a, &b).unwrap();
                assert!((p.cost - brute_force_cost(&d)).abs() <= 1e-9, "n={n} m={m}");
                assert_valid_path(&p.pairs, n, m);
                assert!((path_cost(&a, &b, &p.pairs) - p.cost).abs() <= 1e-9);
                instances += 1;
            }
        }
    }
    assert!(instances >= 100);
}

#[test]
fn dtw_cost_hand_example() {
    // 1-D sequences [0, 1, 2] and [0, 2]: best path (0,0) (1,0)|(1,1) (2,1), cost 1
    let a = vec![vec![0.0], vec![1.0], vec![2.0]];
    let b = vec![vec![0.0], vec![2.0]];
    let p = dtw(&a, &b).unwrap();
    assert_eq!(p.cost, 1.0);
    // (1,0) and (1,1) tie at accumulated cost 1; the diagonal predecessor of (2,1) is (1,0)
    assert_eq!(p.pairs, vec![(0, 0), (1, 0), (2, 1)]);
}

#[test]
fn zero_cost_grid_takes_diagonal_then_vertical() {
    let p = dtw_from_costs(&vec![vec![0.0; 3]; 5]);
    assert_eq!(p.pairs, vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 2)]);
    let p = dtw_from_costs(&vec![vec![0.0; 5]; 3]);
    assert_eq!(p.pairs, vec![(0, 0), (0, 1), (0, 2), (1, 3), (2, 4)]);
}

proptest! {
    #[test]
    fn dtw_cost_is_symmetric(n in 1usize..8, m in 1usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = random_seq(n, 2, &mut r);
        let b = random_seq(m, 2, &mut r);
        let ab = dtw(&a, &b).unwrap().cost;
        let ba = dtw(&b, &a).unwrap().cost;
        prop_assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn identical_sequences_cost_nothing(n in 1usize..10, seed in 0u64..1000) {
        let a = random_seq(n, 4, &mut rng(seed));
        let p = dtw(&a, &a).unwrap();
        prop_assert_eq!(p.cost, 0.0);
        prop_assert_eq!(p.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }
}

fn trained_like_model() -> dismesh_core::MeshVae<f64> {
    let mut m = micro_model(0);
    randomize(&mut m, 5);
    m
}

fn meshes(count: usize) -> Vec<TriangleMesh> {
    let base = grid(4, 4);
    (0..count).map(|i| base.with_vertices(jitter(&base, 0.2, i as u64)).unwrap()).collect()
}

#[test]
fn self_transfer_equals_reconstruction() {
    let model = trained_like_model();
    let m = &meshes(1)[0];
    let t = tasks::transfer(&model, m, m).unwrap();
    let codes = model.encode_means(&[m]).unwrap();
    let recon = model.decode(&codes).unwrap();
    assert_eq!(t.vertices(), recon[0].as_slice());
    assert_eq!(t.faces(), m.faces());
}

#[test]
fn transfer_combines_the_two_codes() {
    let model = trained_like_model();
    let ms = meshes(2);
    let t = tasks::transfer(&model, &ms[0], &ms[1]).unwrap();
    let c = model.encode_means(&[&ms[0], &ms[1]]).unwrap();
    let expected = model.decode(&[c[0].swap_pose(&c[1])]).unwrap();
    assert_eq!(t.vertices(), expected[0].as_slice());
}

#[test]
fn topology_mismatch_is_rejected() {
    let model = trained_like_model();
    let other = grid(3, 3);
    let ok = &meshes(1)[0];
    assert!(matches!(tasks::transfer(&model, &other, ok), Err(TaskError::Topology(_))));
    assert!(matches!(tasks::transfer(&model, ok, &other), Err(TaskError::Topology(_))));
    assert!(matches!(tasks::match_shape(&model, &other, &[(ok, 0)]), Err(TaskError::Topology(_))));
}

#[test]
fn synchronizing_a_sequence_with_itself_is_diagonal() {
    let model = trained_like_model();
    let ms = meshes(6);
    let seq: Vec<&TriangleMesh> = ms.iter().collect();
    let p = tasks::synchronize(&model, &seq, &seq).unwrap();
    assert_eq!(p.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    assert_eq!(p.cost, 0.0);
    assert!(matches!(tasks::synchronize(&model, &[], &seq), Err(TaskError::EmptySequence(_))));
}

#[test]
fn matching_ranks_the_query_itself_first() {
    let model = trained_like_model();
    let ms = meshes(5);
    let gallery: Vec<(&TriangleMesh, u64)> = ms.iter().zip([40, 41, 42, 43, 44]).collect();
    let ranked = tasks::match_shape(&model, &ms[3], &gallery).unwrap();
    assert_eq!(ranked.len(), 5);
    assert_eq!(ranked[0].subject_id, 43);
    assert_eq!(ranked[0].distance, 0.0);
    assert!(ranked.windows(2).all(|w| w[0].distance <= w[1].distance));
    assert!(matches!(tasks::match_shape(&model, &ms[0], &[]), Err(TaskError::EmptyGallery)));
}

#[test]
fn prior_samples_are_seeded() {
    let model = trained_like_model();
    let refs = meshes(3);
    let refs: Vec<&TriangleMesh> = refs.iter().collect();
    let a = tasks::sample_prior(&model, 4, 9, &refs).unwrap();
    let b = tasks::sample_prior(&model, 4, 9, &refs).unwrap();
    let c = tasks::sample_prior(&model, 4, 10, &refs).unwrap();
    assert_eq!(a.meshes.len(), 4);
    for (x, y) in a.meshes.iter().zip(&b.meshes) {
        assert_eq!(x.vertices(), y.vertices());
    }
    assert_ne!(a.meshes[0].vertices(), c.meshes[0].vertices());
    assert_eq!(a.diversity, b.diversity);

    let mut pair_sum = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            pair_sum += vertex_rmse(a.meshes[i].vertices(), a.meshes[j].vertices());
        }
    }
    assert!((a.diversity.unwrap() - pair_sum / 6.0).abs() < 1e-12);
    let spec: f64 = a
        .meshes
        .iter()
        .map(|s| refs.iter().map(|r| vertex_rmse(s.vertices(), r.vertices())).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / 4.0;
    assert!((a.specificity.unwrap() - spec).abs() < 1e-12);
}

#[test]
fn single_sample_has_no_diversity() {
    let model = trained_like_model();
    let s = tasks::sample_prior(&model, 1, 0, &[]).unwrap();
    assert_eq!(s.diversity, None);
    assert_eq!(s.specificity, None);
    assert!(matches!(tasks::sample_prior(&model, 0, 0, &[]), Err(TaskError::NoSamples)));
}

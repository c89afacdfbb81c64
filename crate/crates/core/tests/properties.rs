use htnet::metrics::{self, Pose3};
use htnet::{Graph, Skeleton, Tensor};
use nalgebra::{DMatrix, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose3 {
    (0..17)
        .map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)])
        .collect()
}

fn similarity(p: &Pose3, s: f64, r: &Rotation3<f64>, t: [f64; 3]) -> Pose3 {
    p.iter()
        .map(|x| {
            let y = s * (r * Vector3::new(x[0], x[1], x[2]));
            [y.x + t[0], y.y + t[1], y.z + t[2]]
        })
        .collect()
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| tensor(r, c))) {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.softmax_rows(x).unwrap();
        let y = g.value(y);
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_then_concat_is_identity(t in tensor(4, 9), a in 1usize..4, b in 1usize..4) {
        let widths = [a, b, 9 - a - b];
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let parts = g.split_channels(x, &widths).unwrap();
        let y = g.concat_channels(&parts).unwrap();
        prop_assert_eq!(g.value(y), &t);
    }

    #[test]
    fn procrustes_ignores_similarity_of_source(
        seed in any::<u64>(),
        s in 0.2f64..5.0,
        angles in (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
        t in (-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng, 500.0);
        let pred = random_pose(&mut rng, 500.0);
        let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
        let moved = similarity(&pred, s, &r, [t.0, t.1, t.2]);
        let a = metrics::procrustes_align(&pred, &gt).unwrap();
        let b = metrics::procrustes_align(&moved, &gt).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                prop_assert!((x[k] - y[k]).abs() < 1e-9 * 500.0, "{} vs {}", x[k], y[k]);
            }
        }
    }

    #[test]
    fn procrustes_recovers_similarity(
        seed in any::<u64>(),
        s in 0.2f64..5.0,
        angles in (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng, 500.0);
        let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
        let pred = similarity(&gt, s, &r, [10.0, -20.0, 30.0]);
        let err = metrics::p_mpjpe(&[pred], &[gt]).unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn aligned_error_never_exceeds_raw(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Pose3> = (0..3).map(|_| random_pose(&mut rng, 400.0)).collect();
        let pred: Vec<Pose3> = (0..3).map(|_| random_pose(&mut rng, 400.0)).collect();
        prop_assert!(metrics::p_mpjpe(&pred, &gt).unwrap() <= metrics::mpjpe(&pred, &gt).unwrap() + 1e-9);
    }

    #[test]
    fn pck_monotone_in_threshold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = vec![random_pose(&mut rng, 100.0)];
        let pred = vec![random_pose(&mut rng, 100.0)];
        let mut last = -1.0;
        for t in 0..60 {
            let v = metrics::pck(&pred, &gt, t as f64 * 5.0).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
    }
}

fn brute_mpjpe(pred: &[Pose3], gt: &[Pose3]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for f in 0..pred.len() {
        for j in 0..pred[f].len() {
            let mut sq = 0.0;
            for k in 0..3 {
                sq += (pred[f][j][k] - gt[f][j][k]).powi(2);
            }
            sum += sq.sqrt();
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn metrics_match_scalar_oracles() {
    let s = Skeleton::h36m17();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let gt: Vec<Pose3> = (0..20).map(|_| random_pose(&mut rng, 300.0)).collect();
    let pred: Vec<Pose3> = (0..20).map(|_| random_pose(&mut rng, 300.0)).collect();
    assert!((metrics::mpjpe(&pred, &gt).unwrap() - brute_mpjpe(&pred, &gt)).abs() < 1e-9);

    let breakdown = metrics::pdof_breakdown(&pred, &gt, &s).unwrap();
    let per_joint = metrics::per_joint_mpjpe(&pred, &gt).unwrap();
    let mut recombined = 0.0;
    for (&level, &m) in &breakdown {
        let joints: Vec<usize> = (0..17).filter(|&j| s.pdof()[j] == level).collect();
        let mut oracle = 0.0;
        for f in 0..20 {
            for &j in &joints {
                oracle += brute_mpjpe(&[vec![pred[f][j]]], &[vec![gt[f][j]]]);
            }
        }
        oracle /= (20 * joints.len()) as f64;
        assert!((m - oracle).abs() < 1e-9);
        recombined += m * joints.len() as f64;
    }
    let total: f64 = per_joint.iter().sum();
    assert!((recombined - total).abs() < 1e-9);

    let samples: Vec<f64> = metrics::auc_thresholds()
        .map(|t| metrics::pck(&pred, &gt, t).unwrap())
        .collect();
    assert_eq!(samples.len(), 31);
    assert_eq!(metrics::auc(&pred, &gt).unwrap(), samples.iter().sum::<f64>() / 31.0);
}

#[test]
fn l2_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, n) = (4, 17);
    let mk = |rng: &mut ChaCha8Rng| {
        Tensor::new(vec![b * n, 3], (0..b * n * 3).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap()
    };
    let (p, g) = (mk(&mut rng), mk(&mut rng));
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..n {
            for k in 0..3 {
                sum += (p.at(i * n + j, k) - g.at(i * n + j, k)).powi(2);
            }
        }
    }
    let oracle = sum / (b * n) as f64;
    assert!((htnet::train::l2_loss(&p, &g).unwrap() - oracle).abs() < 1e-9 * oracle);
}

#[test]
fn adjacency_is_symmetric_with_unit_spectral_radius() {
    let adj = Skeleton::h36m17().normalized_adjacency();
    let n = adj.size();
    for i in 0..n {
        for j in 0..n {
            assert_eq!(adj.get(i, j), adj.get(j, i));
        }
    }
    let m = DMatrix::from_row_slice(n, n, adj.values());
    let radius = m.clone().symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(radius <= 1.0 + 1e-9, "{radius}");

    // Power iteration as a second, decomposition-free estimate.
    let mut v = DMatrix::from_element(n, 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = &m * &v;
        lambda = w.norm() / v.norm();
        v = w.normalize();
    }
    assert!(lambda <= 1.0 + 1e-9 && lambda > 0.99, "{lambda}");
}

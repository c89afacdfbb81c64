//! Hand-evaluated examples for the embedding, the three blocks and the mixer.

use htnet::model::{
    embed, gbi_forward, ipc_forward, ljc_forward, mixer_forward, ChannelMlp, GbiParams, IpcParams, LjcParams,
    MixerParams, Norm,
};
use htnet::skeleton::normalized_adjacency;
use htnet::{ModelConfig, ModelParams, Skeleton, Structure, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_mlp(width: usize, hidden: usize) -> ChannelMlp<Tensor> {
    ChannelMlp {
        norm: Norm {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        },
        fc1: Tensor::zeros(&[width, hidden]),
        fc2: Tensor::zeros(&[hidden, width]),
    }
}

fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn small_config() -> ModelConfig {
    ModelConfig::default().with_channels(24).with_mixers(1)
}

#[test]
fn embed_examples() {
    let c = small_config();
    let mut p = ModelParams::init(&c, 0).unwrap();
    let zero = Tensor::zeros(&[17, 2]);

    let pos = p.e_pos.clone();
    assert_eq!(embed(&p, &zero).unwrap(), pos);

    p.e_pos = Tensor::zeros(&[17, 24]);
    assert_eq!(embed(&p, &zero).unwrap(), Tensor::zeros(&[17, 24]));

    p.e_pos = pos.clone();
    let mut one_hot = Tensor::zeros(&[17, 2]);
    one_hot.data_mut()[5 * 2 + 1] = 1.0;
    let out = embed(&p, &one_hot).unwrap();
    for ch in 0..24 {
        assert_eq!(out.at(5, ch), p.embed.at(1, ch) + pos.at(5, ch));
        assert_eq!(out.at(4, ch), pos.at(4, ch));
    }

    assert!(embed(&p, &Tensor::zeros(&[16, 2])).is_err());
}

#[test]
fn ljc_examples() {
    let adj1 = normalized_adjacency(1, &[]).unwrap();
    let eye = LjcParams {
        w1: Tensor::identity(3),
        w2: Tensor::identity(3),
    };
    let x = Tensor::from_rows(&[[0.5, -1.25, 2.0]]).unwrap();
    let y = ljc_forward(&eye, &x, &adj1).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - (b + gelu(*b))).abs() < 1e-15);
    }

    let s = Skeleton::h36m17();
    let adj = s.normalized_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = LjcParams {
        w1: random(&mut rng, &[8, 8]),
        w2: random(&mut rng, &[8, 8]),
    };
    assert_eq!(ljc_forward(&p, &Tensor::zeros(&[17, 8]), &adj).unwrap(), Tensor::zeros(&[17, 8]));

    let x = random(&mut rng, &[17, 8]);
    let y = ljc_forward(&p, &x, &adj).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.max_abs_diff(&x) > 1e-6);

    // Independent dense evaluation of X + A gelu(A X W1) W2.
    let a = adj.to_tensor();
    let mm = |l: &Tensor, r: &Tensor| {
        let (m, k, n) = (l.rows(), l.cols(), r.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|t| l.at(i, t) * r.at(t, j)).sum();
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    };
    let h = mm(&mm(&a, &x), &p.w1).map(gelu);
    let expect = mm(&mm(&a, &h), &p.w2);
    for i in 0..17 {
        for j in 0..8 {
            assert!((y.at(i, j) - x.at(i, j) - expect.at(i, j)).abs() < 1e-12);
        }
    }

    assert!(ljc_forward(&p, &Tensor::zeros(&[16, 8]), &adj).is_err());
}

#[test]
fn ipc_zero_in_zero_out() {
    let s = Skeleton::h36m17();
    let p = IpcParams {
        conv1: Tensor::zeros(&[16, 8]),
        conv2: Tensor::zeros(&[24, 8]),
        mlp1: zero_mlp(8, 48),
        mlp2: zero_mlp(8, 48),
    };
    let z = Tensor::zeros(&[17, 8]);
    assert_eq!(ipc_forward(&p, &z, &z, &s).unwrap(), z);
}

#[test]
fn ipc_hand_trace_single_channel() {
    // C' = 1: the channel MLPs' layer norm maps any scalar to its shift (0 here), so
    // each limb feature is exactly gelu(conv · window).
    let s = Skeleton::h36m17();
    let (a1, a2) = (0.7, -0.4);
    let (b1, b2, b3) = (0.3, 0.9, -0.6);
    let p = IpcParams {
        conv1: Tensor::new(vec![2, 1], vec![a1, a2]).unwrap(),
        conv2: Tensor::new(vec![3, 1], vec![b1, b2, b3]).unwrap(),
        mlp1: zero_mlp(1, 6),
        mlp2: zero_mlp(1, 6),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x_ipc = random(&mut rng, &[17, 1]);
    let y_ljc = random(&mut rng, &[17, 1]);
    let out = ipc_forward(&p, &x_ipc, &y_ljc, &s).unwrap();
    let xt: Vec<f64> = (0..17).map(|j| x_ipc.at(j, 0) + y_ljc.at(j, 0)).collect();

    let mut expect = xt.clone();
    for &[j1, j2, j3] in s.limbs() {
        let f1 = gelu(a1 * xt[j2] + a2 * xt[j3]);
        let f2 = gelu(b1 * xt[j1] + b2 * xt[j2] + b3 * xt[j3]);
        expect[j3] += f1 + f2;
        expect[j2] += f2;
    }
    for j in 0..17 {
        assert!((out.at(j, 0) - expect[j]).abs() < 1e-15, "joint {j}");
    }
}

#[test]
fn ipc_leaves_low_pdof_joints_untouched() {
    let s = Skeleton::h36m17();
    let c = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let p = ModelParams::init(&c, seed).unwrap();
        let ipc = p.mixers[0].ipc.as_ref().unwrap();
        let x = random(&mut rng, &[17, 8]);
        let y = random(&mut rng, &[17, 8]);
        let out = ipc_forward(ipc, &x, &y, &s).unwrap();
        for j in 0..17 {
            let delta: Vec<f64> = (0..8).map(|k| out.at(j, k) - x.at(j, k) - y.at(j, k)).collect();
            let moved = delta.iter().any(|d| *d != 0.0);
            match s.pdof()[j] {
                0 | 1 => assert!(!moved, "joint {j} changed"),
                _ => assert!(moved, "joint {j} unchanged"),
            }
        }
    }
}

fn gbi_params(w: usize, rng: &mut ChaCha8Rng) -> GbiParams<Tensor> {
    GbiParams {
        wq: random(rng, &[w, w]),
        bq: random(rng, &[w]),
        wk: random(rng, &[w, w]),
        bk: random(rng, &[w]),
        wv: random(rng, &[w, w]),
        bv: random(rng, &[w]),
        w_out: Tensor::identity(w),
        b_out: Tensor::zeros(&[w]),
        norm: Norm {
            gamma: Tensor::full(&[w], 1.0),
            beta: Tensor::zeros(&[w]),
        },
    }
}

fn project(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum::<f64>())
        .collect()
}

#[test]
fn gbi_uniform_attention_averages_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = 8;
    let mut p = gbi_params(w, &mut rng);
    p.wq = Tensor::zeros(&[w, w]);
    p.wk = Tensor::zeros(&[w, w]);
    let x = random(&mut rng, &[17, w]);
    let y = random(&mut rng, &[17, w]);
    let out = gbi_forward(&p, &x, &y, 2).unwrap();

    let xt: Vec<Vec<f64>> = (0..17).map(|j| (0..w).map(|k| x.at(j, k) + y.at(j, k)).collect()).collect();
    let mut mean_v = vec![0.0; w];
    for row in &xt {
        for (m, v) in mean_v.iter_mut().zip(project(row, &p.wv, &p.bv)) {
            *m += v / 17.0;
        }
    }
    let branch = layer_norm(&mean_v);
    for j in 0..17 {
        for k in 0..w {
            assert!((out.at(j, k) - xt[j][k] - branch[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn gbi_single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = 8;
    let p = gbi_params(w, &mut rng);
    let x = random(&mut rng, &[1, w]);
    let y = Tensor::zeros(&[1, w]);
    let out = gbi_forward(&p, &x, &y, 4).unwrap();
    let branch = layer_norm(&project(x.data(), &p.wv, &p.bv));
    for k in 0..w {
        assert!((out.at(0, k) - x.at(0, k) - branch[k]).abs() < 1e-12);
    }
}

#[test]
fn gbi_two_tokens_hand_evaluated() {
    // N = 2, one head, scalar channel: layer norm of a single channel returns its
    // shift, so the block adds exactly beta.
    let p = GbiParams {
        wq: Tensor::full(&[1, 1], 0.5),
        bq: Tensor::zeros(&[1]),
        wk: Tensor::full(&[1, 1], 2.0),
        bk: Tensor::zeros(&[1]),
        wv: Tensor::full(&[1, 1], 1.0),
        bv: Tensor::zeros(&[1]),
        w_out: Tensor::full(&[1, 1], 1.0),
        b_out: Tensor::zeros(&[1]),
        norm: Norm {
            gamma: Tensor::full(&[1], 1.0),
            beta: Tensor::full(&[1], 0.25),
        },
    };
    let x = Tensor::from_rows(&[[1.0], [-2.0]]).unwrap();
    let out = gbi_forward(&p, &x, &Tensor::zeros(&[2, 1]), 1).unwrap();
    assert_eq!(out.data(), &[1.25, -1.75]);

    // Two channels, one head: scores q_i·k_j / sqrt(2), softmax, weighted values.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = gbi_params(2, &mut rng);
    let x = random(&mut rng, &[2, 2]);
    let out = gbi_forward(&p, &x, &Tensor::zeros(&[2, 2]), 1).unwrap();
    let rows: Vec<&[f64]> = vec![x.row(0), x.row(1)];
    let q: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &p.wq, &p.bq)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &p.wk, &p.bk)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &p.wv, &p.bv)).collect();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        let h: Vec<f64> = (0..2).map(|c| (s[0].exp() * v[0][c] + s[1].exp() * v[1][c]) / z).collect();
        let branch = layer_norm(&h);
        for c in 0..2 {
            assert!((out.at(i, c) - x.at(i, c) - branch[c]).abs() < 1e-12);
        }
    }
}

fn zero_mixer(c: &ModelConfig) -> MixerParams<Tensor> {
    let mut m = ModelParams::init(c, 0).unwrap().mixers.remove(0);
    m.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    m
}

#[test]
fn identity_degenerate_mixer() {
    let s = Skeleton::h36m17();
    let adj = s.normalized_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[17, 24]);

    let parallel = small_config().with_structure(Structure::Parallel);
    let y = mixer_forward(&zero_mixer(&parallel), &parallel, &x, &s, &adj).unwrap();
    assert_eq!(y, x);

    // With progressive feeding each slice also receives the previous blocks' outputs,
    // which are identities here: (x1, x2 + x1, x3 + x2 + x1).
    let progressive = small_config();
    let y = mixer_forward(&zero_mixer(&progressive), &progressive, &x, &s, &adj).unwrap();
    for j in 0..17 {
        for k in 0..8 {
            let (x1, x2, x3) = (x.at(j, k), x.at(j, k + 8), x.at(j, k + 16));
            assert_eq!(y.at(j, k), x1);
            assert_eq!(y.at(j, k + 8), x2 + x1);
            assert_eq!(y.at(j, k + 16), x3 + (x2 + x1));
        }
    }

    let serial = small_config().with_structure(Structure::Serial);
    let y = mixer_forward(&zero_mixer(&serial), &serial, &x, &s, &adj).unwrap();
    assert_eq!(y, x);
}

#[test]
fn structures_differ_and_keep_shape() {
    let s = Skeleton::h36m17();
    let adj = s.normalized_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[17, 24]);
    let prog = small_config();
    let par = small_config().with_structure(Structure::Parallel);
    let p = ModelParams::init(&prog, 11).unwrap();
    let a = mixer_forward(&p.mixers[0], &prog, &x, &s, &adj).unwrap();
    let b = mixer_forward(&p.mixers[0], &par, &x, &s, &adj).unwrap();
    assert_eq!(a.shape(), &[17, 24]);
    assert_eq!(b.shape(), &[17, 24]);
    assert!(a.max_abs_diff(&b) > 1e-6);

    let ser = small_config().with_structure(Structure::Serial);
    let ps = ModelParams::init(&ser, 11).unwrap();
    let c = mixer_forward(&ps.mixers[0], &ser, &x, &s, &adj).unwrap();
    assert_eq!(c.shape(), &[17, 24]);
}

#[test]
fn every_channel_slice_matters() {
    let s = Skeleton::h36m17();
    let adj = s.normalized_adjacency();
    let c = small_config();
    let p = ModelParams::init(&c, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[17, 24]);
    let base = mixer_forward(&p.mixers[0], &c, &x, &s, &adj).unwrap();
    for slice in 0..3 {
        let mut xp = x.clone();
        for j in 0..17 {
            xp.data_mut()[j * 24 + slice * 8 + 3] += 0.1;
        }
        let y = mixer_forward(&p.mixers[0], &c, &xp, &s, &adj).unwrap();
        assert!(y.max_abs_diff(&base) > 1e-6, "slice {slice} ignored");
    }
}

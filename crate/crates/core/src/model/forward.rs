//! Forward computation of the hierarchical mixer network.
//!
//! Activations are `(B*N) x C` matrices: `B` samples of `N` joint rows each. The
//! `*_graph` builders record onto a [`Graph`] so the same code serves inference and
//! training; the plain `*_forward` functions wrap them for a single pose.

use std::sync::Arc;

use super::config::{ModelConfig, Structure};
use super::params::{ChannelMlp, GbiParams, IpcParams, LjcParams, MixerParams, ModelParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::skeleton::{AdjacencyMatrix, Skeleton, LIMB_COUNT};
use crate::{Error, Result};

/// Per-skeleton constants the forward pass needs: the normalized adjacency and the
/// limb-major joint groups used by the part-level block.
#[derive(Clone, Debug)]
pub struct Topology {
    joints: usize,
    adjacency: Arc<Tensor>,
    limbs: [[usize; 3]; LIMB_COUNT],
}

impl Topology {
    pub fn new(skeleton: &Skeleton) -> Self {
        Topology::with_adjacency(skeleton, &skeleton.normalized_adjacency())
    }

    pub fn with_adjacency(skeleton: &Skeleton, adj: &AdjacencyMatrix) -> Self {
        Topology {
            joints: skeleton.joint_count(),
            adjacency: Arc::new(adj.to_tensor()),
            limbs: *skeleton.limbs(),
        }
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    fn batch_of(&self, g: &Graph, x: Var) -> Result<usize> {
        let rows = g.shape(x)[0];
        if rows % self.joints != 0 {
            return Err(Error::JointCount {
                got: rows,
                expected: self.joints,
                skeleton: "active".into(),
            });
        }
        Ok(rows / self.joints)
    }

    /// Gather pairs for a limb-major window: for every sample and limb, the joints in
    /// `slots` (indices into the limb triple) in order.
    fn gather(&self, batch: usize, slots: &[usize]) -> Arc<[(usize, usize)]> {
        let k = slots.len();
        let mut pairs = Vec::with_capacity(batch * LIMB_COUNT * k);
        for b in 0..batch {
            for (l, limb) in self.limbs.iter().enumerate() {
                for (t, &s) in slots.iter().enumerate() {
                    pairs.push(((b * LIMB_COUNT + l) * k + t, b * self.joints + limb[s]));
                }
            }
        }
        pairs.into()
    }

    /// Scatter pairs placing limb feature `b*4 + l` at the joints in `slots`.
    fn scatter(&self, batch: usize, slots: &[usize]) -> Arc<[(usize, usize)]> {
        let mut pairs = Vec::new();
        for b in 0..batch {
            for (l, limb) in self.limbs.iter().enumerate() {
                for &s in slots {
                    pairs.push((b * self.joints + limb[s], b * LIMB_COUNT + l));
                }
            }
        }
        pairs.into()
    }
}

/// Attention probability matrices recorded during a forward pass, one per GBI block.
/// Each is `(B*heads*N) x N`.
pub type AttentionTrace = Vec<Var>;

pub fn channel_mlp_graph(g: &mut Graph, p: &ChannelMlp<Var>, x: Var) -> Result<Var> {
    let h = g.layer_norm(x, p.norm.gamma, p.norm.beta)?;
    let h = g.matmul(h, p.fc1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, p.fc2)?;
    g.add(x, h)
}

/// `X + A·gelu(A·X·W1)·W2` per sample.
pub fn ljc_graph(g: &mut Graph, p: &LjcParams<Var>, x: Var, topo: &Topology) -> Result<Var> {
    topo.batch_of(g, x)?;
    let h = g.matmul(x, p.w1)?;
    let h = g.block_left_mul(topo.adjacency.clone(), h)?;
    let h = g.gelu(h);
    let h = g.matmul(h, p.w2)?;
    let h = g.block_left_mul(topo.adjacency.clone(), h)?;
    g.add(x, h)
}

/// Part-level constraints on an already-summed input `x_tilde`.
///
/// Limb features come from a kernel-2 window over (2-PDoF, 3-PDoF) joints and a
/// kernel-3 window over (1, 2, 3-PDoF) joints, stride equal to kernel, so each limb
/// yields one feature per window. The first is added at the limb's 3-PDoF joint, the
/// second at its 2- and 3-PDoF joints; every other joint passes through unchanged.
pub fn ipc_graph(g: &mut Graph, p: &IpcParams<Var>, x_tilde: Var, topo: &Topology) -> Result<Var> {
    let batch = topo.batch_of(g, x_tilde)?;
    let w = g.shape(x_tilde)[1];
    let rows = batch * topo.joints;

    let x1 = g.route_rows(x_tilde, topo.gather(batch, &[1, 2]), batch * LIMB_COUNT * 2)?;
    let x1 = g.reshape(x1, &[batch * LIMB_COUNT, 2 * w])?;
    let f1 = g.matmul(x1, p.conv1)?;
    let f1 = g.gelu(f1);
    let f1 = channel_mlp_graph(g, &p.mlp1, f1)?;

    let x2 = g.route_rows(x_tilde, topo.gather(batch, &[0, 1, 2]), batch * LIMB_COUNT * 3)?;
    let x2 = g.reshape(x2, &[batch * LIMB_COUNT, 3 * w])?;
    let f2 = g.matmul(x2, p.conv2)?;
    let f2 = g.gelu(f2);
    let f2 = channel_mlp_graph(g, &p.mlp2, f2)?;

    let r1 = g.route_rows(f1, topo.scatter(batch, &[2]), rows)?;
    let r2 = g.route_rows(f2, topo.scatter(batch, &[1, 2]), rows)?;
    let y = g.add(x_tilde, r1)?;
    g.add(y, r2)
}

/// `X + LN(MSA(X))` with logits scaled by `1/sqrt(d_head)`.
pub fn gbi_graph(
    g: &mut Graph,
    p: &GbiParams<Var>,
    x_tilde: Var,
    heads: usize,
    topo: &Topology,
    trace: &mut AttentionTrace,
) -> Result<Var> {
    topo.batch_of(g, x_tilde)?;
    let w = g.shape(x_tilde)[1];
    let project = |g: &mut Graph, wt: Var, b: Var| -> Result<Var> {
        let h = g.matmul(x_tilde, wt)?;
        g.add_row(h, b)
    };
    let q = project(g, p.wq, p.bq)?;
    let k = project(g, p.wk, p.bk)?;
    let v = project(g, p.wv, p.bv)?;
    let logits = g.attn_scores(q, k, heads, topo.joints, 1.0 / ((w / heads) as f64).sqrt())?;
    let probs = g.softmax_rows(logits)?;
    trace.push(probs);
    let heads_out = g.attn_apply(probs, v, heads, topo.joints)?;
    let msa = g.matmul(heads_out, p.w_out)?;
    let msa = g.add_row(msa, p.b_out)?;
    let normed = g.layer_norm(msa, p.norm.gamma, p.norm.beta)?;
    g.add(x_tilde, normed)
}

pub fn mixer_graph(
    g: &mut Graph,
    p: &MixerParams<Var>,
    config: &ModelConfig,
    x: Var,
    topo: &Topology,
    trace: &mut AttentionTrace,
) -> Result<Var> {
    let ljc = |g: &mut Graph, x: Var| match &p.ljc {
        Some(lp) => ljc_graph(g, lp, x, topo),
        None => Ok(x),
    };
    let ipc = |g: &mut Graph, x: Var| match &p.ipc {
        Some(ip) => ipc_graph(g, ip, x, topo),
        None => Ok(x),
    };
    let mut gbi = |g: &mut Graph, x: Var| match &p.gbi {
        Some(gp) => gbi_graph(g, gp, x, config.heads, topo, trace),
        None => Ok(x),
    };

    let y = match config.structure {
        Structure::Serial => {
            let y = ljc(g, x)?;
            let y = ipc(g, y)?;
            gbi(g, y)?
        }
        Structure::Progressive | Structure::Parallel => {
            let w = config.block_width();
            let parts = g.split_channels(x, &[w, w, w])?;
            let progressive = config.structure == Structure::Progressive;
            let y_ljc = ljc(g, parts[0])?;
            let x_ipc = if progressive { g.add(parts[1], y_ljc)? } else { parts[1] };
            let y_ipc = ipc(g, x_ipc)?;
            let x_gbi = if progressive { g.add(parts[2], y_ipc)? } else { parts[2] };
            let y_gbi = gbi(g, x_gbi)?;
            g.concat_channels(&[y_ljc, y_ipc, y_gbi])?
        }
    };
    channel_mlp_graph(g, &p.mlp, y)
}

/// `input · embed + E_pos` for a `(B*N) x 2` input.
pub fn embed_graph(g: &mut Graph, p: &ModelParams<Var>, input: Var, topo: &Topology) -> Result<Var> {
    let batch = topo.batch_of(g, input)?;
    let x = g.matmul(input, p.embed)?;
    let n = topo.joints;
    let pairs: Arc<[(usize, usize)]> = (0..batch * n).map(|r| (r, r % n)).collect();
    let pos = g.route_rows(p.e_pos, pairs, batch * n)?;
    g.add(x, pos)
}

/// Full network on a `(B*N) x 2` input; returns the `(B*N) x 3` prediction.
pub fn model_graph(
    g: &mut Graph,
    p: &ModelParams<Var>,
    config: &ModelConfig,
    input: Var,
    topo: &Topology,
    trace: &mut AttentionTrace,
) -> Result<Var> {
    if p.mixers.len() != config.mixers {
        return Err(Error::InvalidConfig(format!(
            "params hold {} mixers, config expects {}",
            p.mixers.len(),
            config.mixers
        )));
    }
    if topo.joints != config.joint_count {
        return Err(Error::JointCount {
            got: topo.joints,
            expected: config.joint_count,
            skeleton: "model config".into(),
        });
    }
    let mut x = embed_graph(g, p, input, topo)?;
    for m in &p.mixers {
        x = mixer_graph(g, m, config, x, topo, trace)?;
    }
    let y = g.matmul(x, p.head)?;
    Ok(g.scale(y, config.output_scale))
}

fn check_joints(t: &Tensor, joints: usize, cols: usize, what: &str) -> Result<()> {
    let (rows, c) = t.require_rank2("forward input")?;
    if c != cols {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            lhs: t.shape().to_vec(),
            rhs: vec![joints, cols],
        });
    }
    if rows != joints {
        return Err(Error::JointCount {
            got: rows,
            expected: joints,
            skeleton: what.into(),
        });
    }
    Ok(())
}

fn constants<'a, P>(g: &mut Graph, bind: impl FnOnce(&mut dyn FnMut(&str, &'a Tensor) -> Var) -> P) -> P {
    bind(&mut |_, t| g.constant(t.clone()))
}

/// `pose2d · embed + E_pos` for one `N x 2` pose.
pub fn embed(params: &ModelParams, pose2d: &Tensor) -> Result<Tensor> {
    let n = params.e_pos.rows();
    check_joints(pose2d, n, 2, "pose2d")?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(pose2d.clone());
    let x = g.matmul(x, p.embed)?;
    let pos = g.add(x, p.e_pos)?;
    Ok(g.value(pos).clone())
}

/// Joint-level block on one `N x w` input.
pub fn ljc_forward(params: &LjcParams<Tensor>, x: &Tensor, adj: &AdjacencyMatrix) -> Result<Tensor> {
    let n = adj.size();
    check_joints(x, n, params.w1.rows(), "ljc input")?;
    let mut g = Graph::new();
    let p = constants(&mut g, |f| params.map("", f));
    let topo = Topology {
        joints: n,
        adjacency: Arc::new(adj.to_tensor()),
        limbs: [[0; 3]; LIMB_COUNT],
    };
    let xv = g.constant(x.clone());
    let y = ljc_graph(&mut g, &p, xv, &topo)?;
    Ok(g.value(y).clone())
}

/// Part-level block: `X_ipc + Y_ljc`, then the limb constraints.
pub fn ipc_forward(params: &IpcParams<Tensor>, x_ipc: &Tensor, y_ljc: &Tensor, skeleton: &Skeleton) -> Result<Tensor> {
    let n = skeleton.joint_count();
    let w = params.conv1.cols();
    check_joints(x_ipc, n, w, "ipc input")?;
    check_joints(y_ljc, n, w, "ljc output")?;
    let mut g = Graph::new();
    let p = constants(&mut g, |f| params.map("", f));
    let topo = Topology::new(skeleton);
    let a = g.constant(x_ipc.clone());
    let b = g.constant(y_ljc.clone());
    let xt = g.add(a, b)?;
    let y = ipc_graph(&mut g, &p, xt, &topo)?;
    Ok(g.value(y).clone())
}

/// Body-level block: `X_gbi + Y_ipc`, then `X + LN(MSA(X))`.
pub fn gbi_forward(params: &GbiParams<Tensor>, x_gbi: &Tensor, y_ipc: &Tensor, heads: usize) -> Result<Tensor> {
    let n = x_gbi.shape().first().copied().unwrap_or(0);
    let w = params.wq.rows();
    check_joints(x_gbi, n, w, "gbi input")?;
    check_joints(y_ipc, n, w, "ipc output")?;
    let mut g = Graph::new();
    let p = constants(&mut g, |f| params.map("", f));
    let topo = Topology {
        joints: n,
        adjacency: Arc::new(Tensor::identity(n)),
        limbs: [[0; 3]; LIMB_COUNT],
    };
    let a = g.constant(x_gbi.clone());
    let b = g.constant(y_ipc.clone());
    let xt = g.add(a, b)?;
    let y = gbi_graph(&mut g, &p, xt, heads, &topo, &mut Vec::new())?;
    Ok(g.value(y).clone())
}

/// One hierarchical mixer on an `N x C` input.
pub fn mixer_forward(
    params: &MixerParams<Tensor>,
    config: &ModelConfig,
    x: &Tensor,
    skeleton: &Skeleton,
    adj: &AdjacencyMatrix,
) -> Result<Tensor> {
    check_joints(x, skeleton.joint_count(), config.channels, "mixer input")?;
    let mut g = Graph::new();
    let p = constants(&mut g, |f| params.map("", f));
    let topo = Topology::with_adjacency(skeleton, adj);
    let xv = g.constant(x.clone());
    let y = mixer_graph(&mut g, &p, config, xv, &topo, &mut Vec::new())?;
    Ok(g.value(y).clone())
}

/// Output of a traced forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Tensor,
    /// One `(B*heads*N) x N` probability matrix per attention block, in layer order.
    pub attention: Vec<Tensor>,
}

/// Lifts one `N x 2` normalized pose to `N x 3`.
pub fn model_forward(params: &ModelParams, config: &ModelConfig, pose2d: &Tensor, skeleton: &Skeleton) -> Result<Tensor> {
    check_joints(pose2d, skeleton.joint_count(), 2, "pose2d")?;
    Ok(forward_batch(params, config, pose2d, &Topology::new(skeleton))?.output)
}

/// Lifts a `(B*N) x 2` batch and returns the `(B*N) x 3` output with attention maps.
pub fn forward_batch(params: &ModelParams, config: &ModelConfig, input: &Tensor, topo: &Topology) -> Result<ForwardTrace> {
    params.matches(config)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let mut trace = Vec::new();
    let y = model_graph(&mut g, &p, config, x, topo, &mut trace)?;
    Ok(ForwardTrace {
        output: g.value(y).clone(),
        attention: trace.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

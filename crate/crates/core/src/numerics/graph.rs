//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node; node indices are a topological
//! order, so the backward pass is a single reverse sweep. Index arguments (row
//! routing, head layout, fixed adjacency) are plain values, never nodes, and carry no
//! gradient.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    SliceCols {
        src: Var,
        offset: usize,
    },
    Route {
        src: Var,
        pairs: Arc<[(usize, usize)]>,
    },
    Reshape(Var),
    BlockLeftMul {
        x: Var,
        mat: Arc<Tensor>,
    },
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        tokens: usize,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        heads: usize,
        tokens: usize,
    },
    Sum(Var),
    MeanSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape. Build it with the op methods, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`. Parameters not on any path to the loss get zeros.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .ok_or(Error::NotDifferentiable(v.0))
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn acc<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut [f64] {
    slot.get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.require_rank2("matmul")?;
        let (k2, n) = bv.require_rank2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, n) = av.require_rank2("add_row")?;
        if rv.len() != n {
            return Err(mismatch("add_row", av, rv));
        }
        let mut t = av.clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let ng = self.needs(&[a]);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Normalizes each row over its columns, then applies per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.require_rank2("layer_norm")?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != n {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.len() != n {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, n) = av.require_rank2("softmax_rows")?;
        let mut t = av.clone();
        for row in t.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::SoftmaxRows(a), ng))
    }

    /// Concatenates matrices with equal row counts along the channel (column) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (m, _) = first.require_rank2("concat_channels")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = pv.require_rank2("concat_channels")?;
            if pm != m {
                return Err(mismatch("concat_channels", first, pv));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(pv.row(i));
            }
            offset += w;
        }
        let t = Tensor::new(vec![m, total], out)?;
        let ng = self.needs(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Splits the channel axis into consecutive slices of the given widths.
    pub fn split_channels(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let av = self.value(a);
        let (_, n) = av.require_rank2("split_channels")?;
        if widths.iter().sum::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "split_channels",
                lhs: av.shape().to_vec(),
                rhs: widths.to_vec(),
            });
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(a, offset, w)?);
            offset += w;
        }
        Ok(out)
    }

    fn slice_cols(&mut self, a: Var, offset: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_rank2("slice_cols")?;
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * n + offset..i * n + offset + width]);
        }
        let t = Tensor::new(vec![m, width], out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::SliceCols { src: a, offset }, ng))
    }

    /// Builds an `out_rows x cols` matrix where row `dst` accumulates row `src` of `a`
    /// for every `(dst, src)` pair. Rows never named as a destination are zero.
    /// Gathers, scatters and broadcasts are all expressed this way.
    pub fn route_rows(&mut self, a: Var, pairs: Arc<[(usize, usize)]>, out_rows: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_rank2("route_rows")?;
        let mut out = vec![0.0; out_rows * n];
        for &(dst, src) in pairs.iter() {
            if dst >= out_rows || src >= m {
                return Err(Error::ShapeMismatch {
                    op: "route_rows",
                    lhs: vec![dst, src],
                    rhs: vec![out_rows, m],
                });
            }
            for (o, x) in out[dst * n..(dst + 1) * n].iter_mut().zip(av.row(src)) {
                *o += x;
            }
        }
        let t = Tensor::new(vec![out_rows, n], out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Route { src: a, pairs }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// For `x` holding consecutive `T`-row blocks, left-multiplies every block by the
    /// constant `T x T` matrix `mat`.
    pub fn block_left_mul(&mut self, mat: Arc<Tensor>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.require_rank2("block_left_mul")?;
        let (t, t2) = mat.require_rank2("block_left_mul")?;
        if t != t2 || t == 0 || rows % t != 0 {
            return Err(mismatch("block_left_mul", &mat, xv));
        }
        let mut out = vec![0.0; rows * d];
        for b in 0..rows / t {
            let off = b * t * d;
            gemm(
                t,
                t,
                d,
                1.0,
                mat.data(),
                false,
                &xv.data()[off..off + t * d],
                false,
                0.0,
                &mut out[off..off + t * d],
            );
        }
        let tv = Tensor::new(vec![rows, d], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(tv, Op::BlockLeftMul { x, mat }, ng))
    }

    /// Scaled dot-product logits for multi-head attention.
    ///
    /// `q`, `k` are `(B*T) x D` with `D = heads * d_head`; the result is
    /// `(B*heads*T) x T` with row `(b*heads + h)*T + i`.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, tokens: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (rows, d) = qv.require_rank2("attn_scores")?;
        if qv.shape() != kv.shape() || heads == 0 || d % heads != 0 || tokens == 0 || rows % tokens != 0 {
            return Err(mismatch("attn_scores", qv, kv));
        }
        let batch = rows / tokens;
        let dh = d / heads;
        let mut out = vec![0.0; batch * heads * tokens * tokens];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tokens {
                    let qi = &qv.row(b * tokens + i)[h * dh..(h + 1) * dh];
                    let orow = ((b * heads + h) * tokens + i) * tokens;
                    for j in 0..tokens {
                        let kj = &kv.row(b * tokens + j)[h * dh..(h + 1) * dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        out[orow + j] = dot * scale;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * heads * tokens, tokens], out)?;
        let ng = self.needs(&[q, k]);
        Ok(self.push(
            t,
            Op::AttnScores {
                q,
                k,
                heads,
                tokens,
                scale,
            },
            ng,
        ))
    }

    /// Applies attention weights laid out as in [`Graph::attn_scores`] to `v`,
    /// writing each head's result into its own channel slice.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let (rows, d) = vv.require_rank2("attn_apply")?;
        if heads == 0 || d % heads != 0 || tokens == 0 || rows % tokens != 0 {
            return Err(mismatch("attn_apply", pv, vv));
        }
        let batch = rows / tokens;
        if pv.shape() != [batch * heads * tokens, tokens] {
            return Err(mismatch("attn_apply", pv, vv));
        }
        let dh = d / heads;
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tokens {
                    let prow = pv.row((b * heads + h) * tokens + i);
                    let o = &mut out[(b * tokens + i) * d + h * dh..(b * tokens + i) * d + (h + 1) * dh];
                    for (j, &w) in prow.iter().enumerate() {
                        let vj = &vv.row(b * tokens + j)[h * dh..(h + 1) * dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let ng = self.needs(&[p, v]);
        Ok(self.push(t, Op::AttnApply { p, v, heads, tokens }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(&[a]);
        self.push(t, Op::Sum(a), ng)
    }

    /// Mean of squared entries.
    pub fn mean_sq(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let t = Tensor::scalar(av.data().iter().map(|x| x * x).sum::<f64>() / n);
        let ng = self.needs(&[a]);
        self.push(t, Op::MeanSq(a), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::NotDifferentiable(loss.0));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else { continue };
            let g = g.data();
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].needs_grad;

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if wants(*a) {
                        gemm(m, n, k, 1.0, g, false, bv.data(), true, 1.0, acc(&mut before[a.0], av.shape()));
                    }
                    if wants(*b) {
                        gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, acc(&mut before[b.0], bv.shape()));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if wants(*a) {
                        for (d, x) in acc(&mut before[a.0], val(*a).shape()).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                    if wants(*b) {
                        for (d, x) in acc(&mut before[b.0], val(*b).shape()).iter_mut().zip(g) {
                            *d += sign * x;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*a) {
                        for (d, x) in acc(&mut before[a.0], val(*a).shape()).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                    if wants(*row) {
                        let rv = val(*row);
                        let n = rv.len();
                        let dr = acc(&mut before[row.0], rv.shape());
                        for chunk in g.chunks(n) {
                            for (d, x) in dr.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (d, x) in acc(&mut before[a.0], val(*a).shape()).iter_mut().zip(g) {
                        *d += s * x;
                    }
                }
                Op::Gelu(a) => {
                    let av = val(*a);
                    for ((d, x), gi) in acc(&mut before[a.0], av.shape()).iter_mut().zip(av.data()).zip(g) {
                        *d += gelu_grad(*x) * gi;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma);
                    let n = gv.len();
                    let m = inv_std.len();
                    if wants(*gamma) {
                        let dg = acc(&mut before[gamma.0], gv.shape());
                        for i in 0..m {
                            for j in 0..n {
                                dg[j] += g[i * n + j] * xhat[i * n + j];
                            }
                        }
                    }
                    if wants(*beta) {
                        let db = acc(&mut before[beta.0], val(*beta).shape());
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                    }
                    if wants(*x) {
                        let dx = acc(&mut before[x.0], val(*x).shape());
                        let mut dxhat = vec![0.0; n];
                        for i in 0..m {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                dxhat[j] = g[i * n + j] * gv.data()[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat[i * n + j];
                            }
                            let nf = n as f64;
                            for j in 0..n {
                                dx[i * n + j] += inv_std[i] / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols().max(1);
                    let da = acc(&mut before[a.0], y.shape());
                    for ((drow, yrow), grow) in da.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let w = pv.cols();
                        if wants(*p) {
                            let dp = acc(&mut before[p.0], pv.shape());
                            for i in 0..m {
                                for j in 0..w {
                                    dp[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { src, offset } => {
                    let sv = val(*src);
                    let n = sv.cols();
                    let w = node.value.cols();
                    let ds = acc(&mut before[src.0], sv.shape());
                    for i in 0..node.value.rows() {
                        for j in 0..w {
                            ds[i * n + offset + j] += g[i * w + j];
                        }
                    }
                }
                Op::Route { src, pairs } => {
                    let sv = val(*src);
                    let n = sv.cols();
                    let ds = acc(&mut before[src.0], sv.shape());
                    for &(dst, s) in pairs.iter() {
                        for j in 0..n {
                            ds[s * n + j] += g[dst * n + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    for (d, x) in acc(&mut before[a.0], val(*a).shape()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                Op::BlockLeftMul { x, mat } => {
                    let xv = val(*x);
                    let (rows, d) = (xv.rows(), xv.cols());
                    let t = mat.rows();
                    let dx = acc(&mut before[x.0], xv.shape());
                    for b in 0..rows / t {
                        let off = b * t * d;
                        gemm(
                            t,
                            t,
                            d,
                            1.0,
                            mat.data(),
                            true,
                            &g[off..off + t * d],
                            false,
                            1.0,
                            &mut dx[off..off + t * d],
                        );
                    }
                }
                Op::AttnScores {
                    q,
                    k,
                    heads,
                    tokens,
                    scale,
                } => {
                    let (qv, kv) = (val(*q), val(*k));
                    let (rows, d) = (qv.rows(), qv.cols());
                    let (heads, tokens) = (*heads, *tokens);
                    let dh = d / heads;
                    let batch = rows / tokens;
                    let mut dq = wants(*q).then(|| vec![0.0; rows * d]);
                    let mut dk = wants(*k).then(|| vec![0.0; rows * d]);
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..tokens {
                                let grow = &g[((b * heads + h) * tokens + i) * tokens..][..tokens];
                                let qi = (b * tokens + i) * d + h * dh;
                                for (j, &gs) in grow.iter().enumerate() {
                                    let kj = (b * tokens + j) * d + h * dh;
                                    let w = gs * scale;
                                    if let Some(dq) = dq.as_mut() {
                                        for c in 0..dh {
                                            dq[qi + c] += w * kv.data()[kj + c];
                                        }
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        for c in 0..dh {
                                            dk[kj + c] += w * qv.data()[qi + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dq) = dq {
                        for (d, x) in acc(&mut before[q.0], qv.shape()).iter_mut().zip(dq) {
                            *d += x;
                        }
                    }
                    if let Some(dk) = dk {
                        for (d, x) in acc(&mut before[k.0], kv.shape()).iter_mut().zip(dk) {
                            *d += x;
                        }
                    }
                }
                Op::AttnApply { p, v, heads, tokens } => {
                    let (pv, vv) = (val(*p), val(*v));
                    let (rows, d) = (vv.rows(), vv.cols());
                    let (heads, tokens) = (*heads, *tokens);
                    let dh = d / heads;
                    let batch = rows / tokens;
                    let mut dp = wants(*p).then(|| vec![0.0; pv.len()]);
                    let mut dv = wants(*v).then(|| vec![0.0; vv.len()]);
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..tokens {
                                let prow_idx = ((b * heads + h) * tokens + i) * tokens;
                                let go = &g[(b * tokens + i) * d + h * dh..][..dh];
                                for j in 0..tokens {
                                    let vj = (b * tokens + j) * d + h * dh;
                                    if let Some(dp) = dp.as_mut() {
                                        let s: f64 = go.iter().zip(&vv.data()[vj..vj + dh]).map(|(x, y)| x * y).sum();
                                        dp[prow_idx + j] += s;
                                    }
                                    if let Some(dv) = dv.as_mut() {
                                        let w = pv.data()[prow_idx + j];
                                        for c in 0..dh {
                                            dv[vj + c] += w * go[c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dp) = dp {
                        for (d, x) in acc(&mut before[p.0], pv.shape()).iter_mut().zip(dp) {
                            *d += x;
                        }
                    }
                    if let Some(dv) = dv {
                        for (d, x) in acc(&mut before[v.0], vv.shape()).iter_mut().zip(dv) {
                            *d += x;
                        }
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for d in acc(&mut before[a.0], val(*a).shape()).iter_mut() {
                        *d += g0;
                    }
                }
                Op::MeanSq(a) => {
                    let av = val(*a);
                    let c = 2.0 * g[0] / av.len().max(1) as f64;
                    for (d, x) in acc(&mut before[a.0], av.shape()).iter_mut().zip(av.data()) {
                        *d += c * x;
                    }
                }
            }
        }

        // Differentiable leaves with no path to the loss get explicit zeros.
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

//! Learnable parameters as a tree generic over its leaves.
//!
//! The same tree holds stored weights (`Tensor`), their graph handles (`Var`) during a
//! forward pass, and gradients. Traversal order is fixed (registration order) and is
//! the order used by the optimizer and the checkpoint writer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::Result;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> Norm<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `x + fc2(gelu(fc1(LN(x))))`, bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMlp<T> {
    pub norm: Norm<T>,
    pub fc1: T,
    pub fc2: T,
}

impl<T> ChannelMlp<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> ChannelMlp<U> {
        ChannelMlp {
            norm: self.norm.map(&join(prefix, "norm"), f),
            fc1: f(&join(prefix, "fc1"), &self.fc1),
            fc2: f(&join(prefix, "fc2"), &self.fc2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        f(&join(prefix, "fc1"), &mut self.fc1);
        f(&join(prefix, "fc2"), &mut self.fc2);
    }
}

/// Joint-level graph convolution: two independent `w x w` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LjcParams<T> {
    pub w1: T,
    pub w2: T,
}

impl<T> LjcParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> LjcParams<U> {
        LjcParams {
            w1: f(&join(prefix, "w1"), &self.w1),
            w2: f(&join(prefix, "w2"), &self.w2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "w2"), &mut self.w2);
    }
}

/// Part-level constraint block.
///
/// `conv1` is `(2w) x w` and `conv2` is `(3w) x w`: row `t*w + c` holds the weights for
/// input channel `c` of the `t`-th joint inside the kernel window.
#[derive(Clone, Debug, PartialEq)]
pub struct IpcParams<T> {
    pub conv1: T,
    pub conv2: T,
    pub mlp1: ChannelMlp<T>,
    pub mlp2: ChannelMlp<T>,
}

impl<T> IpcParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> IpcParams<U> {
        IpcParams {
            conv1: f(&join(prefix, "conv1"), &self.conv1),
            conv2: f(&join(prefix, "conv2"), &self.conv2),
            mlp1: self.mlp1.map(&join(prefix, "mlp1"), f),
            mlp2: self.mlp2.map(&join(prefix, "mlp2"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "conv1"), &mut self.conv1);
        f(&join(prefix, "conv2"), &mut self.conv2);
        self.mlp1.visit_mut(&join(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&join(prefix, "mlp2"), f);
    }
}

/// Body-level multi-head self-attention. Projections carry biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GbiParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub w_out: T,
    pub b_out: T,
    pub norm: Norm<T>,
}

impl<T> GbiParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> GbiParams<U> {
        GbiParams {
            wq: f(&join(prefix, "wq"), &self.wq),
            bq: f(&join(prefix, "bq"), &self.bq),
            wk: f(&join(prefix, "wk"), &self.wk),
            bk: f(&join(prefix, "bk"), &self.bk),
            wv: f(&join(prefix, "wv"), &self.wv),
            bv: f(&join(prefix, "bv"), &self.bv),
            w_out: f(&join(prefix, "w_out"), &self.w_out),
            b_out: f(&join(prefix, "b_out"), &self.b_out),
            norm: self.norm.map(&join(prefix, "norm"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "bq"), &mut self.bq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "bk"), &mut self.bk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "bv"), &mut self.bv);
        f(&join(prefix, "w_out"), &mut self.w_out);
        f(&join(prefix, "b_out"), &mut self.b_out);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams<T> {
    pub ljc: Option<LjcParams<T>>,
    pub ipc: Option<IpcParams<T>>,
    pub gbi: Option<GbiParams<T>>,
    pub mlp: ChannelMlp<T>,
}

impl<T> MixerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> MixerParams<U> {
        MixerParams {
            ljc: self.ljc.as_ref().map(|p| p.map(&join(prefix, "ljc"), f)),
            ipc: self.ipc.as_ref().map(|p| p.map(&join(prefix, "ipc"), f)),
            gbi: self.gbi.as_ref().map(|p| p.map(&join(prefix, "gbi"), f)),
            mlp: self.mlp.map(&join(prefix, "mlp"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(p) = self.ljc.as_mut() {
            p.visit_mut(&join(prefix, "ljc"), f);
        }
        if let Some(p) = self.ipc.as_mut() {
            p.visit_mut(&join(prefix, "ipc"), f);
        }
        if let Some(p) = self.gbi.as_mut() {
            p.visit_mut(&join(prefix, "gbi"), f);
        }
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// All learnable weights of the network.
///
/// `embed` is `2 x C`, `e_pos` is `N x C`, `head` is `C x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embed: T,
    pub e_pos: T,
    pub mixers: Vec<MixerParams<T>>,
    pub head: T,
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f("embed", &self.embed),
            e_pos: f("e_pos", &self.e_pos),
            mixers: self
                .mixers
                .iter()
                .enumerate()
                .map(|(i, m)| m.map(&format!("mixers.{i}"), f))
                .collect(),
            head: f("head", &self.head),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("embed", &mut self.embed);
        f("e_pos", &mut self.e_pos);
        for (i, m) in self.mixers.iter_mut().enumerate() {
            m.visit_mut(&format!("mixers.{i}"), f);
        }
        f("head", &mut self.head);
    }

    /// Leaves with their dotted names, in registration order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

impl ModelParams<Tensor> {
    /// Draws parameters for `config`; deterministic in `seed`.
    ///
    /// Weights and biases are uniform in `±1/sqrt(fan_in)`, layer norms start at
    /// scale 1 and shift 0, and `e_pos` is normal with std 0.02. Every value is
    /// rounded to `f32` so checkpoints round-trip exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.channels;
        let w = config.block_width();
        let r = config.mlp_ratio;
        let embed = init.uniform(&[2, c], 2);
        let e_pos = init.normal(&[config.joint_count, c], 0.02);
        let mut mixers = Vec::with_capacity(config.mixers);
        for _ in 0..config.mixers {
            let ljc = config.blocks.ljc.then(|| LjcParams {
                w1: init.uniform(&[w, w], w),
                w2: init.uniform(&[w, w], w),
            });
            let ipc = config.blocks.ipc.then(|| IpcParams {
                conv1: init.uniform(&[2 * w, w], 2 * w),
                conv2: init.uniform(&[3 * w, w], 3 * w),
                mlp1: init.mlp(w, r * w),
                mlp2: init.mlp(w, r * w),
            });
            let gbi = config.blocks.gbi.then(|| GbiParams {
                wq: init.uniform(&[w, w], w),
                bq: init.uniform(&[w], w),
                wk: init.uniform(&[w, w], w),
                bk: init.uniform(&[w], w),
                wv: init.uniform(&[w, w], w),
                bv: init.uniform(&[w], w),
                w_out: init.uniform(&[w, w], w),
                b_out: init.uniform(&[w], w),
                norm: Init::norm(w),
            });
            let mlp = init.mlp(c, r * c);
            mixers.push(MixerParams { ljc, ipc, gbi, mlp });
        }
        let head = init.uniform(&[c, 3], c);
        Ok(ModelParams {
            embed,
            e_pos,
            mixers,
            head,
        })
    }

    /// Number of scalar learnables.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter count grouped by block (`embed`, `e_pos`, `head`, `mixers.i.ljc`, ...).
    pub fn block_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.named() {
            let parts: Vec<&str> = name.split('.').collect();
            let block = if parts[0] == "mixers" {
                parts[..3].join(".")
            } else {
                parts[0].to_string()
            };
            match out.last_mut() {
                Some((b, n)) if *b == block => *n += t.len(),
                _ => out.push((block, t.len())),
            }
        }
        out
    }

    /// Registers every tensor on `g`, as a differentiable leaf when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |_, t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn matches(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::zeros_like(config)?;
        let mine = self.named();
        let theirs = reference.named();
        if mine.len() != theirs.len() {
            return Err(crate::Error::InvalidConfig(format!(
                "params have {} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in mine.iter().zip(&theirs) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(crate::Error::InvalidConfig(format!(
                    "tensor {n1} {:?} does not match config tensor {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameters with the right shapes and all values zero.
    pub fn zeros_like(config: &ModelConfig) -> Result<Self> {
        let mut p = ModelParams::init(config, 0)?;
        p.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        Ok(p)
    }
}

impl ModelParams<Var> {
    /// Collects the gradient of every bound parameter.
    pub fn gradients(&self, grads: &Gradients) -> Result<ModelParams<Tensor>> {
        let mut err = None;
        let out = self.map(&mut |_, v| match grads.wrt(*v) {
            Ok(t) => t.clone(),
            Err(e) => {
                err.get_or_insert(e);
                Tensor::zeros(&[])
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

/// Number of learnables implied by `config`, without allocating.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let c = config.channels;
    let w = config.block_width();
    let r = config.mlp_ratio;
    let mlp = |width: usize| 2 * width + 2 * r * width * width;
    let mut per_mixer = mlp(c);
    if config.blocks.ljc {
        per_mixer += 2 * w * w;
    }
    if config.blocks.ipc {
        per_mixer += 5 * w * w + 2 * mlp(w);
    }
    if config.blocks.gbi {
        per_mixer += 4 * (w * w + w) + 2 * w;
    }
    2 * c + config.joint_count * c + 3 * c + config.mixers * per_mixer
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32 as f64)
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches length")
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32 as f64).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches length")
    }

    fn norm(width: usize) -> Norm<Tensor> {
        Norm {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }

    fn mlp(&mut self, width: usize, hidden: usize) -> ChannelMlp<Tensor> {
        ChannelMlp {
            norm: Init::norm(width),
            fc1: self.uniform(&[width, hidden], width),
            fc2: self.uniform(&[hidden, width], hidden),
        }
    }
}

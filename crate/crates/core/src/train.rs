//! L2 loss, Adam and the training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PoseSet;
use crate::metrics::Pose3;
use crate::model::{checkpoint, forward_batch, model_graph, ModelConfig, ModelParams, Topology};
use crate::numerics::{Graph, Tensor, Var};
use crate::skeleton::Skeleton;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 512,
            learning_rate: 1e-3,
            lr_decay_per_epoch: 0.95,
            seed: 0,
            shuffle: true,
            max_steps: None,
            checkpoint_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad(format!("lr_decay_per_epoch must be in (0, 1], got {}", self.lr_decay_per_epoch));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Mean over rows (joints of all samples) of the squared Euclidean distance.
pub fn l2_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.rank() != 2 || pred.cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "l2_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.rows().max(1) as f64)
}

/// Graph form of [`l2_loss`].
pub fn l2_loss_graph(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let cols = g.shape(pred).get(1).copied().unwrap_or(0);
    let d = g.sub(pred, gt)?;
    let m = g.mean_sq(d);
    Ok(g.scale(m, cols as f64))
}

/// Adam state for one parameter tree.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Applies one update in registration order. Updated values are rounded to `f32`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let grads: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        params.visit_mut(&mut |_, p| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].data());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                *x = (*x - update) as f32 as f64;
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

pub const TRACE_CSV_HEADER: &str = "step,epoch,lr,loss";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.lr, r.loss));
    }
    out
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(trace_csv(trace).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    inputs: &Tensor,
    targets: &Tensor,
    topo: &Topology,
) -> Result<(f64, ModelParams)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(inputs.clone());
    let y = model_graph(&mut g, &p, config, x, topo, &mut Vec::new())?;
    let t = g.constant(targets.clone());
    let loss = l2_loss_graph(&mut g, y, t)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, p.gradients(&grads)?))
}

/// Optimizes `params` on `data`. Batches follow a seeded shuffle, so the loss trace is
/// a pure function of the inputs. When `checkpoint_dir` is given the final
/// parameters are written to `checkpoint.htnc` there (and `epoch_NNN.htnc` per epoch
/// if enabled).
pub fn train(
    config: &ModelConfig,
    mut params: ModelParams,
    data: &PoseSet,
    skeleton: &Skeleton,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    config.validate()?;
    params.matches(config)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let topo = Topology::new(skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(&params);
    let mut trace = Vec::new();
    let mut step = 0;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay_per_epoch.powi(epoch as i32);
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let inputs = data.input_batch(batch);
            let targets = data.target_batch(batch);
            let (loss, grads) = loss_and_grads(&params, config, &inputs, &targets, &topo)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            adam.step(&mut params, &grads, lr);
            trace.push(TraceRow { step, epoch, lr, loss });
            step += 1;
        }
        if let (Some(dir), true) = (checkpoint_dir, cfg.checkpoint_every_epoch) {
            checkpoint::save(dir.join(format!("epoch_{epoch:03}.htnc")), config, &params)?;
        }
        log::debug!("epoch {epoch} done, {step} steps");
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(dir.join("checkpoint.htnc"), config, &params)?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Predicted root-relative poses for every frame of `data`, in batches.
pub fn predict(params: &ModelParams, config: &ModelConfig, data: &PoseSet, skeleton: &Skeleton) -> Result<Vec<Pose3>> {
    let topo = Topology::new(skeleton);
    let n = skeleton.joint_count();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for batch in idx.chunks(256) {
        let y = forward_batch(params, config, &data.input_batch(batch), &topo)?.output;
        for b in 0..batch.len() {
            out.push((0..n).map(|j| {
                let r = y.row(b * n + j);
                [r[0], r[1], r[2]]
            }).collect());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        let gt = Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_loss(&gt, &gt).unwrap(), 0.0);
        let one = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let off = Tensor::from_rows(&[[1.0, 2.0, 2.0]]).unwrap();
        assert_eq!(l2_loss(&off, &one).unwrap(), 9.0);
        assert!(l2_loss(&off, &gt).is_err());

        let mut g = Graph::new();
        let a = g.param(off.clone());
        let b = g.constant(one);
        let l = l2_loss_graph(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 9.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_decay_per_epoch: 0.0, ..Default::default() },
            TrainConfig { lr_decay_per_epoch: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let c = ModelConfig::default().with_channels(24).with_mixers(1);
        let mut p = ModelParams::init(&c, 1).unwrap();
        let before = p.clone();
        let zeros = ModelParams::zeros_like(&c).unwrap();
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.step(&mut p, &zeros, 1e-3);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_empty_dataset() {
        let c = ModelConfig::default().with_channels(24).with_mixers(1);
        let p = ModelParams::init(&c, 1).unwrap();
        let mut data = crate::data::synth_generate(1, 0, 0.0);
        data.frames.clear();
        let r = train(&c, p, &data, &Skeleton::h36m17(), &TrainConfig::default(), None);
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}

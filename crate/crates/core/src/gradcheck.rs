//! Finite-difference checks of the reverse-mode gradients.
//!
//! Every check reduces the output under test to `mean((out - R)^2)` for a fixed random
//! `R`, so each output element contributes a distinct weight to the gradient.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::index::sample;
use serde::Serialize;

use crate::model::{model_graph, ModelConfig, ModelParams, Topology};
use crate::numerics::{Graph, Tensor, Var};
use crate::skeleton::Skeleton;
use crate::Result;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Errors are relative to `max(|a|, |n|, FLOOR * max|grad|)`, the max taken over every
/// input of one check. Groups whose true gradient is zero (key biases under softmax,
/// for one) would otherwise compare pure rounding noise against itself.
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>7}  {:>10}  result\n", "name", "checked", "rel_err");
        for e in &self.entries {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>10.2e}  {}\n",
                e.name,
                e.checked,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn reduced<F>(build: &F, inputs: &[Tensor], target: &Tensor, grads: bool) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let r = g.constant(target.clone());
    let d = g.sub(out, r)?;
    let loss = g.mean_sq(d);
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    let grads = vars.iter().map(|&v| gr.wrt(v).cloned()).collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Compares analytic and numeric gradients of `build` with respect to each input.
/// At most `max_per_input` randomly chosen entries of each input are probed.
pub fn check<F>(
    names: &[String],
    inputs: &[Tensor],
    build: F,
    max_per_input: Option<usize>,
    seed: u64,
) -> Result<Vec<GradcheckEntry>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let target = random_tensor(&mut rng, &out_shape);
    let (_, analytic) = reduced(&build, inputs, &target, true)?;

    let global = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = (FLOOR * global).max(1e-12);
    let mut entries = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, name) in names.iter().enumerate() {
        let len = inputs[i].len();
        let idx: Vec<usize> = match max_per_input {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        for &k in &idx {
            let x0 = inputs[i].data()[k];
            probe[i].data_mut()[k] = x0 + STEP;
            let (up, _) = reduced(&build, &probe, &target, false)?;
            probe[i].data_mut()[k] = x0 - STEP;
            let (down, _) = reduced(&build, &probe, &target, false)?;
            probe[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        entries.push(GradcheckEntry {
            name: name.clone(),
            checked: idx.len(),
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(entries)
}

fn names(op: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{op}[{i}]")).collect()
}

/// Checks every differentiable graph op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let mut out = Vec::new();
    let mut run = |op: &str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        out.extend(check(&names(op, inputs.len()), &inputs, build, None, seed)?);
        Ok(())
    };

    run("matmul", vec![r(&[3, 4]), r(&[4, 5])], &|g, v| g.matmul(v[0], v[1]))?;
    run("add", vec![r(&[3, 4]), r(&[3, 4])], &|g, v| g.add(v[0], v[1]))?;
    run("sub", vec![r(&[3, 4]), r(&[3, 4])], &|g, v| g.sub(v[0], v[1]))?;
    run("add_row", vec![r(&[3, 4]), r(&[1, 4])], &|g, v| g.add_row(v[0], v[1]))?;
    run("scale", vec![r(&[3, 4])], &|g, v| Ok(g.scale(v[0], -2.5)))?;
    run("gelu", vec![r(&[4, 5])], &|g, v| Ok(g.gelu(v[0])))?;
    run("layer_norm", vec![r(&[4, 6]), r(&[1, 6]), r(&[1, 6])], &|g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })?;
    run("softmax_rows", vec![r(&[3, 5])], &|g, v| g.softmax_rows(v[0]))?;
    run("concat_channels", vec![r(&[3, 2]), r(&[3, 4])], &|g, v| g.concat_channels(&[v[0], v[1]]))?;
    run("split_channels", vec![r(&[3, 6])], &|g, v| {
        let parts = g.split_channels(v[0], &[2, 1, 3])?;
        let a = g.scale(parts[0], 2.0);
        let c = g.scale(parts[2], -1.0);
        g.concat_channels(&[parts[1], c, a])
    })?;
    let pairs: Arc<[(usize, usize)]> = vec![(0, 2), (0, 1), (3, 0), (1, 2)].into();
    run("route_rows", vec![r(&[3, 4])], &|g, v| g.route_rows(v[0], pairs.clone(), 5))?;
    run("reshape", vec![r(&[4, 6])], &|g, v| {
        let x = g.reshape(v[0], &[8, 3])?;
        let w = g.constant(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0], [1.5, 0.25]])?);
        g.matmul(x, w)
    })?;
    let mat = Arc::new(r(&[3, 3]));
    run("block_left_mul", vec![r(&[6, 4])], &|g, v| g.block_left_mul(mat.clone(), v[0]))?;
    run("attn_scores", vec![r(&[6, 4]), r(&[6, 4])], &|g, v| g.attn_scores(v[0], v[1], 2, 3, 0.7))?;
    run("attn_apply", vec![r(&[12, 3]), r(&[6, 4])], &|g, v| g.attn_apply(v[0], v[1], 2, 3))?;
    run("sum", vec![r(&[3, 4])], &|g, v| Ok(g.sum(v[0])))?;
    run("mean_sq", vec![r(&[3, 4])], &|g, v| Ok(g.mean_sq(v[0])))?;
    Ok(out)
}

/// Checks every parameter group of a model built from `config` on a random batch.
pub fn model_suite(
    config: &ModelConfig,
    skeleton: &Skeleton,
    seed: u64,
    batch: usize,
    max_per_group: Option<usize>,
) -> Result<Vec<GradcheckEntry>> {
    let template = ModelParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let input = random_tensor(&mut rng, &[batch * skeleton.joint_count(), 2]);
    let topo = Topology::new(skeleton);
    let named = template.named();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let build = |g: &mut Graph, vars: &[Var]| {
        let mut i = 0;
        let p = template.map(&mut |_, _| {
            i += 1;
            vars[i - 1]
        });
        let x = g.constant(input.clone());
        model_graph(g, &p, config, x, &topo, &mut Vec::new())
    };
    check(&names, &tensors, build, max_per_group, seed)
}

/// The op suite plus the `C = 24, M = 1` model on the built-in skeleton.
pub fn run_all(seed: u64) -> Result<GradcheckReport> {
    let mut entries = op_suite(seed)?;
    let config = ModelConfig::default().with_channels(24).with_mixers(1);
    entries.extend(model_suite(&config, &Skeleton::h36m17(), seed, 2, Some(48))?);
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        let entries = op_suite(5).unwrap();
        for e in &entries {
            assert!(e.passed, "{} rel err {:e}", e.name, e.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x*x is 2x, but a constant copy hides half of it from backward.
        let x = Tensor::from_rows(&[[0.3, -1.2]]).unwrap();
        let entries = check(
            &["x".into()],
            &[x],
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                let ct = g.reshape(c, &[2, 1])?;
                g.matmul(v[0], ct)
            },
            None,
            0,
        )
        .unwrap();
        assert!(!entries[0].passed);
    }
}

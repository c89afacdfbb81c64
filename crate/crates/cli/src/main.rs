//! `htnet` command-line tool.
//!
//! Machine-readable results go to stdout (JSON, or CSV where noted); logs and human
//! summaries go to stderr. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use htnet::data::{load_poseset, save_poseset, SynthGenerator};
use htnet::gradcheck;
use htnet::model::checkpoint;
use htnet::train::{self, write_trace_csv};
use htnet::{BlockSet, MetricsReport, ModelConfig, ModelParams, Skeleton, Structure};
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "htnet", version, about = "2D-to-3D human pose lifting")]
struct Cli {
    /// Skeleton definition (JSON). Defaults to the built-in 17-joint h36m17 layout.
    #[arg(long, global = true, value_name = "FILE")]
    skeleton: Option<PathBuf>,

    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StructureArg {
    Progressive,
    Parallel,
    Serial,
}

impl From<StructureArg> for Structure {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::Progressive => Structure::Progressive,
            StructureArg::Parallel => Structure::Parallel,
            StructureArg::Serial => Structure::Serial,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint.htnc and loss.csv into the output directory.
    Train {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Overrides train.seed (and the init seed unless init_seed is set).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a PoseSet; prints a MetricsReport.
    Eval {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Print a CSV header and row instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Write a PoseSet whose p3d are the model's predictions.
    Predict {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Generate a synthetic PoseSet.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_mm: f64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Parameter count and per-block breakdown of a model config.
    Inspect {
        /// Model config JSON, or a run config with a "model" section.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        mixers: Option<usize>,
        #[arg(long, value_enum)]
        structure: Option<StructureArg>,
        /// Attention-only baseline (joint- and part-level blocks removed).
        #[arg(long)]
        gbi_only: bool,
    },
    /// Finite-difference gradient checks; exits 0 iff all pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// An error caused by how the tool was invoked rather than by the work itself.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<htnet::Error>() {
            if matches!(
                e,
                htnet::Error::InvalidConfig(_) | htnet::Error::InvalidTrainConfig(_) | htnet::Error::InvalidSkeleton(_)
            ) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_skeleton(path: Option<&Path>) -> anyhow::Result<Skeleton> {
    match path {
        Some(p) => Skeleton::from_path(p)
            .map_err(|e| usage(format!("skeleton {}: {e}", p.display()))),
        None => Ok(Skeleton::h36m17()),
    }
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let skeleton = load_skeleton(cli.skeleton.as_deref())?;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            epochs,
            batch_size,
            lr,
            max_steps,
        } => {
            let mut rc = match &config {
                Some(p) => {
                    require_file(p, "config")?;
                    RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?
                }
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                rc.train.seed = s;
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(b) = batch_size {
                rc.train.batch_size = b;
            }
            if let Some(l) = lr {
                rc.train.learning_rate = l;
            }
            if max_steps.is_some() {
                rc.train.max_steps = max_steps;
            }
            let data = data.or(rc.data.clone()).ok_or_else(|| usage("missing --data (no data path in config either)"))?;
            let out = out.or(rc.out.clone()).ok_or_else(|| usage("missing --out (no output directory in config either)"))?;
            rc.validate()?;
            check_joint_count(&rc.model, &skeleton)?;
            require_file(&data, "data file")?;
            cmd_train(&rc, &data, &out, &skeleton)
        }
        Command::Eval { ckpt, data, csv } => {
            require_file(&ckpt, "checkpoint")?;
            require_file(&data, "data file")?;
            cmd_eval(&ckpt, &data, csv, &skeleton)
        }
        Command::Predict { ckpt, data, out } => {
            require_file(&ckpt, "checkpoint")?;
            require_file(&data, "data file")?;
            cmd_predict(&ckpt, &data, &out, &skeleton)
        }
        Command::Synth { n, seed, noise_mm, out } => {
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            if !(noise_mm.is_finite() && noise_mm >= 0.0) {
                return Err(usage("--noise-mm must be finite and non-negative"));
            }
            if skeleton.name() != "h36m17" {
                return Err(usage("the synthetic generator only supports the h36m17 skeleton"));
            }
            cmd_synth(n, seed, noise_mm, &out)
        }
        Command::Inspect {
            config,
            channels,
            mixers,
            structure,
            gbi_only,
        } => {
            let mut model = match &config {
                Some(p) => {
                    require_file(p, "config")?;
                    load_model_config(p).map_err(|e| usage(format!("{e:#}")))?
                }
                None => ModelConfig::default(),
            };
            if let Some(c) = channels {
                model.channels = c;
            }
            if let Some(m) = mixers {
                model.mixers = m;
            }
            if let Some(s) = structure {
                model.structure = s.into();
            }
            if gbi_only {
                model.blocks = BlockSet::GBI_ONLY;
            }
            model.validate()?;
            cmd_inspect(&model)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn check_joint_count(model: &ModelConfig, skeleton: &Skeleton) -> anyhow::Result<()> {
    if model.joint_count != skeleton.joint_count() {
        return Err(usage(format!(
            "model joint_count {} does not match skeleton {} with {} joints",
            model.joint_count,
            skeleton.name(),
            skeleton.joint_count()
        )));
    }
    Ok(())
}

/// Accepts either a bare ModelConfig or a RunConfig.
fn load_model_config(path: &Path) -> anyhow::Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("model").is_some() || value.get("train").is_some() {
        let rc: RunConfig = serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        Ok(rc.model)
    } else {
        serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))
    }
}

fn cmd_train(rc: &RunConfig, data: &Path, out: &Path, skeleton: &Skeleton) -> anyhow::Result<ExitCode> {
    let set = load_poseset(data, skeleton).with_context(|| format!("loading {}", data.display()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let init_seed = rc.init_seed.unwrap_or(rc.train.seed);
    let params = ModelParams::init(&rc.model, init_seed)?;
    log::info!(
        "training {} params on {} frames for {} epochs",
        params.param_count(),
        set.len(),
        rc.train.epochs
    );
    let outcome = train::train(&rc.model, params, &set, skeleton, &rc.train, Some(out))?;
    let csv = out.join("loss.csv");
    write_trace_csv(&csv, &outcome.trace)?;
    let last = outcome.trace.last();
    eprintln!(
        "trained {} steps; final loss {}",
        outcome.trace.len(),
        last.map_or(f64::NAN, |r| r.loss)
    );
    print_json(&json!({
        "steps": outcome.trace.len(),
        "final_loss": last.map(|r| r.loss),
        "checkpoint": out.join("checkpoint.htnc"),
        "loss_csv": csv,
    }));
    Ok(ExitCode::SUCCESS)
}

fn load_for_inference(ckpt: &Path, data: &Path, skeleton: &Skeleton) -> anyhow::Result<(ModelConfig, ModelParams, htnet::PoseSet)> {
    let (config, params) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let set = load_poseset(data, skeleton).with_context(|| format!("loading {}", data.display()))?;
    if config.joint_count != skeleton.joint_count() {
        return Err(anyhow!(htnet::Error::JointCount {
            got: skeleton.joint_count(),
            expected: config.joint_count,
            skeleton: skeleton.name().to_string(),
        }));
    }
    Ok((config, params, set))
}

fn cmd_eval(ckpt: &Path, data: &Path, csv: bool, skeleton: &Skeleton) -> anyhow::Result<ExitCode> {
    let (config, params, set) = load_for_inference(ckpt, data, skeleton)?;
    if set.is_empty() {
        return Err(anyhow!(htnet::Error::EmptyDataset)).with_context(|| format!("evaluating {}", data.display()));
    }
    let pred = train::predict(&params, &config, &set, skeleton)?;
    let gt: Vec<_> = set.frames.iter().map(|f| f.p3d.clone()).collect();
    let report = MetricsReport::evaluate(&pred, &gt, skeleton)?;
    eprintln!(
        "{} frames: MPJPE {:.3} mm, P-MPJPE {:.3} mm, PCK {:.2}%, AUC {:.2}%",
        set.len(),
        report.mpjpe,
        report.p_mpjpe,
        report.pck,
        report.auc
    );
    if csv {
        println!("{}\n{}", MetricsReport::CSV_HEADER, report.csv_row());
    } else {
        println!("{}", report.to_json());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(ckpt: &Path, data: &Path, out: &Path, skeleton: &Skeleton) -> anyhow::Result<ExitCode> {
    let (config, params, mut set) = load_for_inference(ckpt, data, skeleton)?;
    let pred = train::predict(&params, &config, &set, skeleton)?;
    for (frame, p) in set.frames.iter_mut().zip(pred) {
        frame.p3d = p;
    }
    save_poseset(out, &set)?;
    eprintln!("wrote {} predicted frames to {}", set.len(), out.display());
    print_json(&json!({ "frames": set.len(), "out": out }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(n: usize, seed: u64, noise_mm: f64, out: &Path) -> anyhow::Result<ExitCode> {
    let set = SynthGenerator::default().generate(n, seed, noise_mm);
    save_poseset(out, &set)?;
    eprintln!("wrote {n} synthetic frames to {}", out.display());
    print_json(&json!({ "frames": n, "seed": seed, "noise_mm": noise_mm, "out": out }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(model: &ModelConfig) -> anyhow::Result<ExitCode> {
    let params = ModelParams::init(model, 0)?;
    let total = params.param_count();
    let blocks = params.block_breakdown();
    let width = blocks.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    eprintln!("{:<width$}  {:>10}", "block", "params");
    for (name, count) in &blocks {
        eprintln!("{name:<width$}  {count:>10}");
    }
    eprintln!("{:<width$}  {total:>10}  ({:.3}M)", "total", total as f64 / 1e6);
    let blocks: Vec<_> = blocks
        .iter()
        .map(|(name, count)| json!({ "block": name, "params": count }))
        .collect();
    print_json(&json!({ "config": model, "total": total, "blocks": blocks }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64) -> anyhow::Result<ExitCode> {
    let report = gradcheck::run_all(seed)?;
    eprint!("{}", report.table());
    let passed = report.passed();
    let worst = report.worst().map(|e| (e.name.clone(), e.max_rel_error));
    eprintln!(
        "{} checks, {}; worst {}",
        report.entries.len(),
        if passed { "all passed" } else { "FAILURES" },
        worst.as_ref().map_or("-".into(), |(n, e)| format!("{n} {e:.2e}"))
    );
    print_json(&json!({
        "passed": passed,
        "tolerance": gradcheck::TOLERANCE,
        "step": gradcheck::STEP,
        "entries": report.entries,
    }));
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

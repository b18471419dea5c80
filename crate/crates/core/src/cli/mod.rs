//! Command-line entry point: `simulate`, `train`, `generate`, `evaluate`.
//!
//! Each command reads a [`RunConfig`] (a preset plus an optional JSON file of
//! overrides), writes its outputs under the configured directories together
//! with the resolved config, and prints a SHA-256 digest per file written.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{EvalBlock, Paths, Preset, RunConfig, SystemBlock};

use crate::dynamics::{divergence_from_bases, generate_dataset, DivergenceCurve, TrajectorySet, VectorField};
use crate::error::{Error, Result};
use crate::eval::{
    compare, containment_of, divergence_csv, one_step_accuracy, rmse_from_rollouts, rollouts, CompareReport,
    DimAccuracy, RmseCurve,
};
use crate::grid::GridSpec;
use crate::seqmodel::{rollout, SeqModel};
use crate::train::{loss_csv, multigrid_train_with, Checkpoint, RunOptions, StageReport, LATEST_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
/// I/O and other failures that are neither configuration nor numerics.
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ttdyn", version, about = "Discrete sequence models of chaotic dynamics")]
pub struct Cli {
    /// JSON file with config overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base settings the config file is applied to.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// System whose preset is used when the config does not name one.
    #[arg(long, global = true, value_parser = ["rossler", "lorenz96"])]
    pub system: Option<String>,
    /// Seed for data, model initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the train and test trajectory sets.
    Simulate,
    /// Train through the grid schedule.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Continue one test trajectory from its first states.
    Generate {
        /// Defaults to the final checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test trajectory supplying the prefix.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        prefix_len: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Error curves, accuracy, containment and divergence comparison.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        return EXIT_NUMERIC;
    }
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::Json(_) | Error::Format { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_OTHER,
    }
}

/// Resolves the run configuration from the command-line flags.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    if !value.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    if let Some(system) = &cli.system {
        if value.pointer("/system/spec/kind").is_none() {
            let base = RunConfig::preset(cli.preset.unwrap_or(Preset::Desk), system)?;
            let spec = serde_json::to_value(base.system.spec)?;
            let obj = value.as_object_mut().unwrap();
            let sys = obj.entry("system").or_insert_with(|| serde_json::json!({}));
            match sys.as_object_mut() {
                Some(s) => {
                    s.insert("spec".into(), spec);
                }
                None => return Err(Error::Config("`system` must be an object".into())),
            }
        }
    }
    let mut cfg = RunConfig::from_value(value, cli.preset)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
        cfg.resolve()?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, cli.force),
        Command::Train { resume } => cmd_train(&cfg, cli.force, *resume),
        Command::Generate {
            checkpoint,
            index,
            prefix_len,
            horizon,
        } => cmd_generate(&cfg, cli.force, checkpoint.as_deref(), *index, *prefix_len, *horizon),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, cli.force, checkpoint.as_deref()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn ensure_fresh(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!("{} already exists (use --force to overwrite)", p.display()))),
        None => Ok(()),
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    println!("wrote {} sha256={}", path.display(), sha256_hex(bytes));
    Ok(())
}

fn write_config(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_output(&dir.join(format!("{command}.config.json")), cfg.to_json()?.as_bytes())
}

/// Train and test splits of the configured system.
pub fn simulate(cfg: &RunConfig) -> Result<(TrajectorySet, TrajectorySet)> {
    let train = generate_dataset(&cfg.system.spec, &cfg.system.train_spec())?;
    let test = generate_dataset(&cfg.system.spec, &cfg.system.test_spec())?;
    Ok((train, test))
}

fn data_paths(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    (cfg.paths.data_dir.join("train.bin"), cfg.paths.data_dir.join("test.bin"))
}

fn load_split(cfg: &RunConfig, path: &Path, expected_steps: usize) -> Result<TrajectorySet> {
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run `simulate` first", path.display())));
    }
    let set = TrajectorySet::read_bin(path, cfg.system.spec)?;
    if set.dim != cfg.system.spec.dim() || set.tau != cfg.system.tau || set.steps != expected_steps {
        return Err(Error::Config(format!(
            "{} holds d={}, tau={}, {} steps but the config expects d={}, tau={}, {} steps",
            path.display(),
            set.dim,
            set.tau,
            set.steps,
            cfg.system.spec.dim(),
            cfg.system.tau,
            expected_steps
        )));
    }
    Ok(set)
}

pub fn cmd_simulate(cfg: &RunConfig, force: bool) -> Result<()> {
    let (train_path, test_path) = data_paths(cfg);
    ensure_fresh(&[train_path.clone(), test_path.clone()], force)?;
    let (train, test) = simulate(cfg)?;
    for (name, set, path) in [("train", &train, &train_path), ("test", &test, &test_path)] {
        let (lo, hi) = crate::grid::fit_bounds(set, 0.0)?;
        println!(
            "{name}: {} trajectories x {} states x {} dims, tau {}, seed {}, bounds {:?} .. {:?}",
            set.count, set.steps, set.dim, set.tau, set.seed, lo, hi
        );
        write_output(path, &set.to_bytes())?;
    }
    write_config(&cfg.paths.data_dir, "simulate", cfg)
}

pub fn cmd_train(cfg: &RunConfig, force: bool, resume: bool) -> Result<()> {
    let reports_path = cfg.paths.report_dir.join("stage_reports.json");
    let final_path = cfg.paths.checkpoint_dir.join(FINAL_CHECKPOINT);
    let resume_from = if resume {
        let latest = cfg.paths.checkpoint_dir.join(LATEST_CHECKPOINT);
        if !latest.exists() {
            return Err(Error::Config(format!("nothing to resume: {} not found", latest.display())));
        }
        Some(Checkpoint::load(&latest)?)
    } else {
        ensure_fresh(&[reports_path.clone(), final_path.clone()], force)?;
        None
    };
    let data = load_split(cfg, &data_paths(cfg).0, cfg.system.steps)?;
    let opts = RunOptions {
        checkpoint_dir: Some(cfg.paths.checkpoint_dir.clone()),
        resume: resume_from,
        log_every: Some(50),
    };
    let (model, reports) = multigrid_train_with(&data, &cfg.train, &cfg.model, opts)?;
    for r in &reports {
        println!(
            "stage {} M={}: loss {:.5} -> {:.5}, {:.1}s",
            r.stage, r.grid_size, r.initial_loss, r.final_loss, r.wall_clock_secs
        );
    }
    let ck = Checkpoint::of_model(&model);
    let bytes = ck.to_bytes()?;
    write_output(&final_path, &bytes)?;
    let dir = &cfg.paths.report_dir;
    write_output(&reports_path, serde_json::to_string_pretty(&reports)?.as_bytes())?;
    write_output(&dir.join("loss.csv"), loss_csv(&reports).as_bytes())?;
    let timings: Vec<_> = reports
        .iter()
        .map(|r| serde_json::json!({"stage": r.stage, "grid_size": r.grid_size, "wall_clock_secs": r.wall_clock_secs}))
        .collect();
    // timings are the one output that differs between reruns
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;
    write_config(dir, "train", cfg)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<SeqModel> {
    let default = cfg.paths.checkpoint_dir.join(FINAL_CHECKPOINT);
    let path = checkpoint.unwrap_or(&default);
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    let model = Checkpoint::load(path)?.model;
    if model.dim() != cfg.system.spec.dim() {
        return Err(Error::Config(format!(
            "checkpoint models {} dimensions but the system has {}",
            model.dim(),
            cfg.system.spec.dim()
        )));
    }
    Ok(model)
}

/// Decoded continuation of test trajectory `index` after its first
/// `prefix_len` states, `(horizon, d)` row-major.
pub fn generate(model: &SeqModel, test: &TrajectorySet, index: usize, prefix_len: usize, horizon: usize) -> Result<Vec<f64>> {
    if index >= test.count {
        return Err(Error::Config(format!("index {index} out of range for {} test trajectories", test.count)));
    }
    if prefix_len == 0 || prefix_len > test.steps {
        return Err(Error::Config(format!("prefix_len {prefix_len} must be in 1..={}", test.steps)));
    }
    let d = test.dim;
    let prefix = model.grid.encode_trajectory(&test.trajectory(index)[..prefix_len * d]);
    let out = rollout(model, &[prefix], &[0], horizon, 0.0, 0)?;
    out[0].decode(&model.grid)
}

pub fn cmd_generate(
    cfg: &RunConfig,
    force: bool,
    checkpoint: Option<&Path>,
    index: usize,
    prefix_len: Option<usize>,
    horizon: Option<usize>,
) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    let csv_path = dir.join(format!("generated_{index}.csv"));
    let bin_path = dir.join(format!("generated_{index}.bin"));
    ensure_fresh(&[csv_path.clone(), bin_path.clone()], force)?;
    let model = load_model(cfg, checkpoint)?;
    let test = load_split(cfg, &data_paths(cfg).1, cfg.system.test_steps)?;
    let prefix_len = prefix_len.unwrap_or(cfg.eval.prefix_len);
    let horizon = horizon.unwrap_or(cfg.eval.horizon);
    let states = generate(&model, &test, index, prefix_len, horizon)?;
    let d = test.dim;

    let mut csv = String::from("t");
    for k in 0..d {
        let _ = write!(csv, ",x{k}");
    }
    csv.push('\n');
    for g in 0..horizon {
        let _ = write!(csv, "{}", (prefix_len + g) as f64 * test.tau);
        for v in &states[g * d..(g + 1) * d] {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write_output(&csv_path, csv.as_bytes())?;
    if horizon >= 2 {
        let set = TrajectorySet {
            states,
            count: 1,
            steps: horizon,
            dim: d,
            tau: test.tau,
            system: test.system,
            seed: test.seed,
        };
        write_output(&bin_path, &set.to_bytes())?;
    }
    write_config(dir, "generate", cfg)
}

/// Everything `evaluate` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: RmseCurve,
    pub accuracy: Vec<DimAccuracy>,
    pub containment: f64,
    pub divergence: DivergenceCurve,
    pub compare: CompareReport,
    pub delta: f64,
}

/// Default initial separation: half the mean grid segment width.
pub fn default_delta(grid: &GridSpec) -> f64 {
    let d = grid.dim();
    (0..d).map(|k| grid.width(k)).sum::<f64>() / d as f64 / 2.0
}

pub fn evaluate(cfg: &RunConfig, model: &SeqModel, test: &TrajectorySet) -> Result<EvalReport> {
    let ev = &cfg.eval;
    let n = ev.n.unwrap_or(test.count).min(test.count);
    if n == 0 {
        return Err(Error::Config("eval.n must be >= 1".into()));
    }
    let test = test.slice(0, n);
    let grid = &model.grid;
    let generated = rollouts(model, grid, &test, ev.prefix_len, ev.horizon)?;
    let rmse = rmse_from_rollouts(grid, &test, ev.prefix_len, &generated)?;
    let containment = containment_of(grid, &generated);
    let accuracy = one_step_accuracy(model, grid, &test, ev.accuracy_windows)?;
    let delta = ev.delta.unwrap_or_else(|| default_delta(grid));
    let bases: Vec<Vec<f64>> = (0..n).map(|i| test.state(i, ev.prefix_len - 1).to_vec()).collect();
    let divergence = divergence_from_bases(
        &cfg.system.spec,
        &bases,
        delta,
        test.tau,
        ev.horizon,
        cfg.system.seed,
        cfg.system.substeps,
    )?;
    let compare = compare(&rmse, &divergence)?;
    Ok(EvalReport {
        rmse,
        accuracy,
        containment,
        divergence,
        compare,
        delta,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, force: bool, checkpoint: Option<&Path>) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    let names = ["rmse.csv", "evaluation.json", "divergence.csv", "compare.csv"];
    ensure_fresh(&names.iter().map(|n| dir.join(n)).collect::<Vec<_>>(), force)?;
    let model = load_model(cfg, checkpoint)?;
    let test = load_split(cfg, &data_paths(cfg).1, cfg.system.test_steps)?;
    let report = evaluate(cfg, &model, &test)?;
    for (k, a) in report.accuracy.iter().enumerate() {
        println!("dim {k}: exact {:.4}, within one {:.4}", a.exact, a.within_one);
    }
    println!("containment {}", report.containment);
    println!(
        "saturation: model {:.4}, true divergence {:.4}, ratio {:.3}",
        report.compare.model_saturation, report.compare.divergence_saturation, report.compare.ratio
    );
    write_output(&dir.join("rmse.csv"), report.rmse.to_csv().as_bytes())?;
    write_output(&dir.join("divergence.csv"), divergence_csv(&report.divergence).as_bytes())?;
    write_output(&dir.join("compare.csv"), report.compare.to_csv().as_bytes())?;
    write_output(&dir.join("evaluation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_config(dir, "evaluate", cfg)
}

/// Stage reports as written by `train`.
pub fn read_stage_reports(path: &Path) -> Result<Vec<StageReport>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

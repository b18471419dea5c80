use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::{DatasetSpec, InitDistribution, SystemSpec, VectorField};
use crate::error::{Error, Result};
use crate::seqmodel::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale sizes. Runs for days on a CPU.
    Paper,
    /// Scaled-down sizes used by the acceptance suite.
    Desk,
}

/// Dataset generation settings for the train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemBlock {
    pub spec: SystemSpec,
    pub train_count: usize,
    pub test_count: usize,
    /// Stored states per training trajectory.
    pub steps: usize,
    /// Stored states per test trajectory.
    pub test_steps: usize,
    pub tau: f64,
    /// Defaults to the standard distribution of the chosen system.
    pub init: Option<InitDistribution>,
    /// Training split seed; the test split uses `seed + 1`.
    pub seed: u64,
    pub substeps: usize,
    pub burn_in: usize,
    pub obs_noise: f64,
}

impl Default for SystemBlock {
    fn default() -> Self {
        SystemBlock {
            spec: SystemSpec::rossler_default(),
            train_count: 50,
            test_count: 20,
            steps: 3000,
            test_steps: 1000,
            tau: 0.1,
            init: None,
            seed: 0,
            substeps: 10,
            burn_in: 0,
            obs_noise: 0.0,
        }
    }
}

impl SystemBlock {
    fn split(&self, count: usize, steps: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            count,
            steps,
            tau: self.tau,
            init: self
                .init
                .clone()
                .unwrap_or_else(|| InitDistribution::default_for(&self.spec)),
            seed,
            substeps: self.substeps,
            burn_in: self.burn_in,
            obs_noise: self.obs_noise,
        }
    }

    pub fn train_spec(&self) -> DatasetSpec {
        self.split(self.train_count, self.steps, self.seed)
    }

    pub fn test_spec(&self) -> DatasetSpec {
        self.split(self.test_count, self.test_steps, self.seed.wrapping_add(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// Real states the model is conditioned on before generating.
    pub prefix_len: usize,
    pub horizon: usize,
    /// Test trajectories used; `None` uses all of them.
    pub n: Option<usize>,
    /// Cap on teacher-forced windows for the accuracy report.
    pub accuracy_windows: usize,
    /// Initial separation for the true-system divergence curve; half the
    /// mean grid segment width when absent.
    pub delta: Option<f64>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            prefix_len: 100,
            horizon: 600,
            n: None,
            accuracy_windows: 400,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "run/data".into(),
            checkpoint_dir: "run/checkpoints".into(),
            report_dir: "run/reports".into(),
        }
    }
}

/// Everything a run needs. Unknown keys anywhere are rejected.
///
/// `model.system_dim` and `model.grid_axis` are derived from `system.spec`
/// and `train.schedule` during resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemBlock,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalBlock,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk, "rossler").expect("built-in preset")
    }
}

fn desk_model(system_dim: usize) -> ModelConfig {
    ModelConfig {
        layers: 4,
        heads: 4,
        embed_dim: 128,
        context_len: 32,
        grid_axis: 2,
        system_dim,
        tt_rank: 8,
        seed: 0,
        ffn_mult: 4,
        factors: None,
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        schedule: vec![2, 3, 5, 9],
        steps_per_stage: 250,
        batch_size: 16,
        seq_len: 32,
        learning_rate: 1e-3,
        lr_warmup: 50,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    /// Built-in settings for `system` (`rossler` or `lorenz96`).
    pub fn preset(preset: Preset, system: &str) -> Result<RunConfig> {
        let mut cfg = match (preset, system) {
            (Preset::Desk, "rossler") => RunConfig {
                system: SystemBlock::default(),
                model: desk_model(3),
                train: desk_train(),
                eval: EvalBlock::default(),
                paths: Paths::default(),
            },
            (Preset::Desk, "lorenz96") => RunConfig {
                system: SystemBlock {
                    spec: SystemSpec::lorenz96(10.0, 8)?,
                    tau: 0.05,
                    burn_in: 400,
                    ..SystemBlock::default()
                },
                model: desk_model(8),
                train: desk_train(),
                eval: EvalBlock {
                    horizon: 400,
                    ..EvalBlock::default()
                },
                paths: Paths::default(),
            },
            (Preset::Paper, "rossler") => RunConfig {
                system: SystemBlock {
                    train_count: 1000,
                    test_count: 20,
                    steps: 10_000,
                    test_steps: 10_000,
                    ..SystemBlock::default()
                },
                model: ModelConfig {
                    layers: 12,
                    heads: 9,
                    embed_dim: 729,
                    context_len: 128,
                    tt_rank: 16,
                    ..desk_model(3)
                },
                train: TrainConfig {
                    schedule: vec![50],
                    steps_per_stage: 100_000,
                    ..desk_train()
                },
                eval: EvalBlock::default(),
                paths: Paths::default(),
            },
            (Preset::Paper, "lorenz96") => RunConfig {
                system: SystemBlock {
                    spec: SystemSpec::lorenz96(10.0, 16)?,
                    train_count: 1000,
                    test_count: 20,
                    steps: 20_000,
                    test_steps: 20_000,
                    tau: 0.05,
                    ..SystemBlock::default()
                },
                model: ModelConfig {
                    layers: 12,
                    heads: 8,
                    embed_dim: 1024,
                    context_len: 128,
                    tt_rank: 16,
                    ..desk_model(16)
                },
                train: TrainConfig {
                    schedule: vec![2, 3, 5, 9, 17, 33],
                    steps_per_stage: 20_000,
                    ..desk_train()
                },
                eval: EvalBlock {
                    horizon: 400,
                    ..EvalBlock::default()
                },
                paths: Paths::default(),
            },
            (_, other) => return Err(Error::Config(format!("unknown system `{other}`"))),
        };
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Applies `overrides` (a partial config) on top of the preset for the
    /// system named in the overrides, or of the default run when no preset
    /// is given.
    pub fn from_value(overrides: Value, preset: Option<Preset>) -> Result<RunConfig> {
        let system = overrides
            .pointer("/system/spec/kind")
            .and_then(Value::as_str)
            .unwrap_or("rossler")
            .to_string();
        let base = RunConfig::preset(preset.unwrap_or(Preset::Desk), &system)?;
        let mut merged = serde_json::to_value(&base)?;
        // a different system kind replaces the whole spec rather than merging into it
        if let (Some(Value::Object(o)), Some(spec)) = (overrides.get("system"), merged.pointer_mut("/system/spec")) {
            if let Some(s) = o.get("spec") {
                if s.get("kind").and_then(Value::as_str) != spec.get("kind").and_then(Value::as_str) {
                    *spec = s.clone();
                }
            }
        }
        merge(&mut merged, overrides);
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, preset: Option<Preset>) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !v.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        RunConfig::from_value(v, preset)
    }

    /// Same seed for data, model and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.system.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Derives dependent fields and checks consistency.
    pub fn resolve(&mut self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Shape(m) => Error::Config(m),
            other => other,
        };
        self.system.spec.validate().map_err(cfg_err)?;
        self.train.validate()?;
        self.model.system_dim = self.system.spec.dim();
        self.model.grid_axis = self.train.schedule[0];
        self.model.validate()?;
        if self.train.seq_len > self.model.context_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.context_len {}",
                self.train.seq_len, self.model.context_len
            )));
        }
        if !(self.system.tau > 0.0 && self.system.tau.is_finite()) {
            return Err(Error::Config(format!("system.tau {} must be positive", self.system.tau)));
        }
        if self.system.train_count == 0 || self.system.test_count == 0 {
            return Err(Error::Config("train_count and test_count must be positive".into()));
        }
        if self.system.steps < self.train.seq_len + 1 {
            return Err(Error::Config(format!(
                "system.steps {} is shorter than one training window ({})",
                self.system.steps,
                self.train.seq_len + 1
            )));
        }
        let needed = self.eval.prefix_len + self.eval.horizon;
        if self.system.test_steps < needed {
            return Err(Error::Config(format!(
                "system.test_steps {} is shorter than prefix_len + horizon = {needed}",
                self.system.test_steps
            )));
        }
        if self.eval.prefix_len == 0 {
            return Err(Error::Config("eval.prefix_len must be >= 1".into()));
        }
        if let Some(d) = self.eval.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("eval.delta {d} must be positive")));
            }
        }
        if let Some(init) = &self.system.init {
            init.validate(self.system.spec.dim()).map_err(cfg_err)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

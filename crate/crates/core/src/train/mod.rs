//! Coarse-to-fine training: optimize on one grid, prolong the grid-coupled
//! parameters onto the refined grid, continue.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Progress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, learning_rate, Adam, AdamConfig};

use crate::dynamics::TrajectorySet;
use crate::error::{Error, Result};
use crate::eval::{accuracy_on_windows, DimAccuracy};
use crate::grid::{fit_bounds, GridSpec, MultiIndexSeq};
use crate::seqmodel::{loss, ModelConfig, SeqModel};
use crate::ttcoding::prolong_rows;

/// How classification heads are initialized on a refined grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Same even/odd rule as the TT cores.
    Prolong,
    /// Fresh N(0, 0.02) weights and zero bias.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Grid axis length per stage, e.g. `[2, 3, 5, 9]`.
    pub schedule: Vec<usize>,
    /// Relative margin added around the data bounds when fitting the grid.
    pub grid_margin: f64,
    pub steps_per_stage: usize,
    /// Per-stage step counts overriding `steps_per_stage`.
    pub stage_steps: Option<Vec<usize>>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub lr_warmup: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub grad_clip: Option<f64>,
    pub head_init: HeadInit,
    /// Reuse the first batch at every step.
    pub full_batch: bool,
    /// Fixed windows on which the stage-start and stage-end losses and the
    /// reported accuracies are measured.
    pub probe_windows: usize,
    /// Mid-stage checkpoint cadence in optimizer steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: vec![2, 3, 5, 9],
            grid_margin: 0.05,
            steps_per_stage: 300,
            stage_steps: None,
            batch_size: 16,
            seq_len: 32,
            learning_rate: 1e-3,
            lr_warmup: 50,
            seed: 0,
            optimizer: AdamConfig::default(),
            grad_clip: Some(1.0),
            head_init: HeadInit::Prolong,
            full_batch: false,
            probe_windows: 64,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.is_empty() {
            return Err(Error::Config("schedule must not be empty".into()));
        }
        if s[0] < 2 {
            return Err(Error::Config(format!("grid size {} is below 2", s[0])));
        }
        if s.len() > 1 {
            if s[0] != 2 {
                return Err(Error::Config("a progressive schedule starts at 2".into()));
            }
            for w in s.windows(2) {
                if w[1] != 2 * w[0] - 1 {
                    return Err(Error::Config(format!(
                        "schedule step {} -> {} is not a refinement (expected {})",
                        w[0],
                        w[1],
                        2 * w[0] - 1
                    )));
                }
            }
        }
        if let Some(o) = &self.stage_steps {
            if o.len() != s.len() {
                return Err(Error::Config(format!(
                    "stage_steps has {} entries for {} stages",
                    o.len(),
                    s.len()
                )));
            }
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.grid_margin >= 0.0 && self.grid_margin.is_finite()) {
            return Err(Error::Config(format!("grid_margin {} must be finite and >= 0", self.grid_margin)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer needs beta1, beta2 in [0,1), epsilon > 0 and weight_decay >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, stage: usize) -> usize {
        match &self.stage_steps {
            Some(o) => o[stage],
            None => self.steps_per_stage,
        }
    }

    pub fn total_steps(&self) -> usize {
        (0..self.schedule.len()).map(|s| self.steps_for(s)).sum()
    }

    /// Equal up to settings that do not affect the trained parameters.
    fn same_run(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            checkpoint_every: None,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Equality ignores `wall_clock_secs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub grid_size: usize,
    /// Batch loss per optimizer step, measured before the step's update.
    pub loss_history: Vec<f64>,
    /// Probe loss on the previous grid just before prolongation.
    pub pre_transition_loss: Option<f64>,
    /// Probe loss on this grid before any update of the stage.
    pub initial_loss: f64,
    /// Probe loss after the stage's last update.
    pub final_loss: f64,
    /// Teacher-forced probe accuracy at the end of the stage.
    pub accuracy: Vec<DimAccuracy>,
    /// Not serialized, so that reports stay reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl PartialEq for StageReport {
    fn eq(&self, other: &Self) -> bool {
        self.stage == other.stage
            && self.grid_size == other.grid_size
            && self.loss_history == other.loss_history
            && self.pre_transition_loss == other.pre_transition_loss
            && self.initial_loss == other.initial_loss
            && self.final_loss == other.final_loss
            && self.accuracy == other.accuracy
            && self.checkpoint == other.checkpoint
    }
}

/// `stage,grid_size,step,loss` rows, with steps counted across stages.
pub fn loss_csv(reports: &[StageReport]) -> String {
    let mut s = String::from("stage,grid_size,step,loss\n");
    let mut step = 0;
    for r in reports {
        for l in &r.loss_history {
            let _ = writeln!(s, "{},{},{step},{l}", r.stage, r.grid_size);
            step += 1;
        }
    }
    s
}

/// Refines the grid and prolongs TT cores and head rows. Transformer blocks
/// and the positional table carry over unchanged.
pub fn prolong_model(model: &SeqModel) -> SeqModel {
    prolong_model_with(model, HeadInit::Prolong)
}

pub fn prolong_model_with(model: &SeqModel, head_init: HeadInit) -> SeqModel {
    let (m, width) = (model.axis_len(), model.width());
    let fine = 2 * m - 1;
    let mut next = model.clone();
    next.grid = model.grid.refine();
    next.config.grid_axis = fine;
    next.params.tt = model.params.tt.prolong();
    match head_init {
        HeadInit::Prolong => {
            for h in next.params.heads.iter_mut() {
                h.w = prolong_rows(&h.w, m, width);
                h.b = prolong_rows(&h.b, m, 1);
            }
        }
        HeadInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            rng.set_stream(1000 + fine as u64);
            let normal = Normal::new(0.0, 0.02).unwrap();
            for h in next.params.heads.iter_mut() {
                h.w = (0..fine * width).map(|_| normal.sample(&mut rng)).collect();
                h.b = vec![0.0; fine];
            }
        }
    }
    next
}

/// Output destinations and resume state for [`multigrid_train_with`].
#[derive(Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Progress lines on stderr every this many steps.
    pub log_every: Option<usize>,
}

/// Batch and probe windows are drawn from dedicated RNG streams: step `n` of
/// stage `s` uses stream `(s << 32) | n`, the probe set uses the last stream.
fn step_rng(seed: u64, stage: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | step as u64);
    rng
}

fn sample_windows<R: Rng>(
    corpus: &[MultiIndexSeq],
    count: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<(Vec<MultiIndexSeq>, Vec<MultiIndexSeq>, Vec<usize>)> {
    let shortest = corpus.iter().map(|s| s.len()).min().unwrap_or(0);
    if corpus.is_empty() || shortest < seq_len + 1 {
        return Err(Error::TooShort {
            needed: seq_len + 1,
            have: shortest,
        });
    }
    let (mut inputs, mut targets, mut origins) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let seq = &corpus[rng.gen_range(0..corpus.len())];
        let start = rng.gen_range(0..=seq.len() - seq_len - 1);
        inputs.push(seq.window(start, start + seq_len));
        targets.push(seq.window(start + 1, start + seq_len + 1));
        origins.push(start);
    }
    Ok((inputs, targets, origins))
}

struct Probe {
    inputs: Vec<MultiIndexSeq>,
    targets: Vec<MultiIndexSeq>,
    origins: Vec<usize>,
}

impl Probe {
    fn new(corpus: &[MultiIndexSeq], cfg: &TrainConfig, ctx: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let len = cfg.seq_len.min(ctx);
        let (inputs, targets, origins) = sample_windows(corpus, cfg.probe_windows.max(1), len, &mut rng)?;
        Ok(Probe {
            inputs,
            targets,
            origins,
        })
    }

    fn loss(&self, model: &SeqModel) -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in self.inputs.chunks(32).zip(self.targets.chunks(32)) {
            total += loss(&model.forward(a)?, b)? * a.len() as f64;
        }
        Ok(total / self.inputs.len() as f64)
    }

    fn accuracy(&self, model: &SeqModel) -> Result<Vec<DimAccuracy>> {
        accuracy_on_windows(model, &self.inputs, &self.targets, &self.origins)
    }
}

struct StageState {
    step: usize,
    adam: Adam,
    losses: Vec<f64>,
    initial_loss: f64,
    pre_transition_loss: Option<f64>,
}

/// Optimizes `model` on an already encoded corpus for the configured number
/// of steps of `stage`.
pub fn train_stage(model: &mut SeqModel, corpus: &[MultiIndexSeq], cfg: &TrainConfig, stage: usize) -> Result<StageReport> {
    cfg.validate()?;
    if stage >= cfg.schedule.len() {
        return Err(Error::invalid(format!("stage {stage} is outside the schedule")));
    }
    let ctx = Ctx {
        cfg,
        opts: &RunOptions::default(),
        completed: &[],
    };
    run_stage(model, corpus, stage, None, None, &ctx)
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    opts: &'a RunOptions,
    completed: &'a [StageReport],
}

fn run_stage(
    model: &mut SeqModel,
    corpus: &[MultiIndexSeq],
    stage: usize,
    resumed: Option<StageState>,
    pre_transition_loss: Option<f64>,
    ctx: &Ctx,
) -> Result<StageReport> {
    let cfg = ctx.cfg;
    let started = Instant::now();
    for seq in corpus {
        if seq.axis_len != model.axis_len() || seq.dim != model.dim() {
            return Err(Error::Shape(format!(
                "corpus encoded for d={}, M={} but the model expects d={}, M={}",
                seq.dim,
                seq.axis_len,
                model.dim(),
                model.axis_len()
            )));
        }
    }
    if cfg.seq_len > model.config.context_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            context_len: model.config.context_len,
        });
    }
    let probe = Probe::new(corpus, cfg, model.config.context_len)?;
    let mut state = match resumed {
        Some(s) => s,
        None => StageState {
            step: 0,
            adam: Adam::new(&model.params),
            losses: Vec::new(),
            initial_loss: probe.loss(model)?,
            pre_transition_loss,
        },
    };
    let total = cfg.steps_for(stage);
    let fixed = if cfg.full_batch {
        Some(sample_windows(corpus, cfg.batch_size, cfg.seq_len, &mut step_rng(cfg.seed, stage, 0))?)
    } else {
        None
    };

    while state.step < total {
        let step = state.step;
        let (inputs, targets, _) = match &fixed {
            Some(b) => b.clone(),
            None => sample_windows(corpus, cfg.batch_size, cfg.seq_len, &mut step_rng(cfg.seed, stage, step))?,
        };
        let (batch_loss, mut grads) = match model.gradients(&inputs, &targets, None) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { loss }) => return Err(Error::Diverged { stage, step, loss }),
            Err(e) => return Err(e),
        };
        if let Some(&first) = state.losses.first() {
            if batch_loss > 10.0 * first {
                return Err(Error::Diverged {
                    stage,
                    step,
                    loss: batch_loss,
                });
            }
        }
        state.losses.push(batch_loss);
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = learning_rate(cfg.learning_rate, cfg.lr_warmup, step);
        state.adam.update(&mut model.params, &grads, lr, &cfg.optimizer);
        state.step += 1;

        if let Some(every) = ctx.opts.log_every {
            if state.step % every == 0 || state.step == total {
                eprintln!(
                    "stage {stage} (M={}) step {}/{total} loss {batch_loss:.5}",
                    model.axis_len(),
                    state.step
                );
            }
        }
        if let (Some(dir), Some(every)) = (&ctx.opts.checkpoint_dir, cfg.checkpoint_every) {
            if state.step % every == 0 && state.step < total {
                let path = dir.join(format!("stage{stage}_step{}.ckpt", state.step));
                write_checkpoint(&path, dir, model, &state, stage, false, ctx)?;
            }
        }
    }
    if let Some(group) = model.params.first_non_finite_group() {
        return Err(Error::NonFiniteGradient {
            group: group.to_string(),
        });
    }

    let mut report = StageReport {
        stage,
        grid_size: model.axis_len(),
        loss_history: state.losses.clone(),
        pre_transition_loss: state.pre_transition_loss,
        initial_loss: state.initial_loss,
        final_loss: probe.loss(model)?,
        accuracy: probe.accuracy(model)?,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    if let Some(dir) = &ctx.opts.checkpoint_dir {
        let path = dir.join(format!("stage{stage}_M{}.ckpt", model.axis_len()));
        report.checkpoint = Some(path.clone());
        let mut completed = ctx.completed.to_vec();
        completed.push(report.clone());
        let done = Ctx { completed: &completed, ..*ctx };
        write_checkpoint(&path, dir, model, &state, stage, true, &done)?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Name of the checkpoint that always holds the most recent state.
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

fn write_checkpoint(
    path: &Path,
    dir: &Path,
    model: &SeqModel,
    state: &StageState,
    stage: usize,
    stage_complete: bool,
    ctx: &Ctx,
) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        train: Some(ctx.cfg.clone()),
        progress: Some(Progress {
            stage,
            step: state.step,
            stage_complete,
            losses: state.losses.clone(),
            initial_loss: state.initial_loss,
            pre_transition_loss: state.pre_transition_loss,
            completed: ctx.completed.to_vec(),
        }),
        optimizer: Some(state.adam.clone()),
    };
    ck.save(path)?;
    ck.save(&dir.join(LATEST_CHECKPOINT))
}

/// Fits the grid to `data` and trains through every stage of the schedule.
pub fn multigrid_train(
    data: &TrajectorySet,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(SeqModel, Vec<StageReport>)> {
    multigrid_train_with(data, cfg, model_cfg, RunOptions::default())
}

pub fn multigrid_train_with(
    data: &TrajectorySet,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    opts: RunOptions,
) -> Result<(SeqModel, Vec<StageReport>)> {
    cfg.validate()?;
    let first = ModelConfig {
        grid_axis: cfg.schedule[0],
        ..model_cfg.clone()
    };
    first.validate()?;
    if data.dim != first.system_dim {
        return Err(Error::Config(format!(
            "data has {} dimensions but the model expects {}",
            data.dim, first.system_dim
        )));
    }

    let mut reports = Vec::new();
    let mut stage = 0;
    let mut pending = None;
    let mut model = match &opts.resume {
        None => {
            let (lo, hi) = fit_bounds(data, cfg.grid_margin)?;
            SeqModel::new(first, GridSpec::new(lo, hi, cfg.schedule[0])?)?
        }
        Some(ck) => {
            let (train, progress, adam) = match (&ck.train, &ck.progress, &ck.optimizer) {
                (Some(t), Some(p), Some(a)) => (t, p, a),
                _ => return Err(Error::Config("checkpoint carries no training state".into())),
            };
            if !train.same_run(cfg) {
                return Err(Error::Config("checkpoint was written with a different training config".into()));
            }
            let resumed_cfg = ModelConfig {
                grid_axis: cfg.schedule[0],
                ..ck.model.config.clone()
            };
            if resumed_cfg != first {
                return Err(Error::Config("checkpoint was written with a different model config".into()));
            }
            reports = progress.completed.clone();
            if progress.stage_complete {
                stage = progress.stage + 1;
            } else {
                stage = progress.stage;
                pending = Some(StageState {
                    step: progress.step,
                    adam: adam.clone(),
                    losses: progress.losses.clone(),
                    initial_loss: progress.initial_loss,
                    pre_transition_loss: progress.pre_transition_loss,
                });
            }
            ck.model.clone()
        }
    };

    while stage < cfg.schedule.len() {
        let mut pre = None;
        if pending.is_none() && model.axis_len() != cfg.schedule[stage] {
            pre = reports.last().map(|r: &StageReport| r.final_loss);
            model = prolong_model_with(&model, cfg.head_init);
        }
        if model.axis_len() != cfg.schedule[stage] {
            return Err(Error::Config(format!(
                "model grid M={} does not match stage {stage} (M={})",
                model.axis_len(),
                cfg.schedule[stage]
            )));
        }
        let corpus = model.grid.encode_set(data)?;
        let ctx = Ctx {
            cfg,
            opts: &opts,
            completed: &reports,
        };
        let report = run_stage(&mut model, &corpus, stage, pending.take(), pre, &ctx)?;
        reports.push(report);
        stage += 1;
    }
    Ok((model, reports))
}

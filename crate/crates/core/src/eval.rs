//! Rollout error curves, teacher-forced accuracy, containment of generated
//! states in the grid box, and comparison with the intrinsic separation growth
//! of the true system.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DivergenceCurve, TrajectorySet};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MultiIndexSeq};
use crate::seqmodel::{argmax, rollout, Forecaster};

/// Rollouts evaluated together in one batched forward call.
const ROLLOUT_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseCurve {
    pub times: Vec<f64>,
    pub rmse: Vec<f64>,
    pub n_trajectories: usize,
    pub prefix_len: usize,
}

impl RmseCurve {
    pub fn to_csv(&self) -> String {
        curve_csv("t,rmse", &self.times, &self.rmse)
    }

    pub fn saturation(&self) -> f64 {
        saturation_level(&self.rmse)
    }
}

pub fn divergence_csv(curve: &DivergenceCurve) -> String {
    curve_csv("t,rms_separation", &curve.times, &curve.rms_separation)
}

fn curve_csv(header: &str, t: &[f64], v: &[f64]) -> String {
    let mut s = String::with_capacity(32 * t.len());
    s.push_str(header);
    s.push('\n');
    for (a, b) in t.iter().zip(v) {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// Mean of the final 20% of a curve (at least one sample).
pub fn saturation_level(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = ((values.len() as f64 * 0.2).ceil() as usize).max(1);
    let tail = &values[values.len() - n..];
    tail.iter().sum::<f64>() / n as f64
}

/// Per-dimension teacher-forced next-index accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimAccuracy {
    pub exact: f64,
    pub within_one: f64,
}

/// Zero-temperature rollouts of `horizon` steps after the first `prefix_len`
/// states of every test trajectory, scored against the continuous truth:
/// `rmse(t) = sqrt(mean_i |x_i(t) - x~_i(t)|^2)`.
pub fn rmse_curve<F: Forecaster + ?Sized>(
    model: &F,
    grid: &GridSpec,
    test: &TrajectorySet,
    prefix_len: usize,
    horizon: usize,
) -> Result<RmseCurve> {
    let generated = rollouts(model, grid, test, prefix_len, horizon)?;
    rmse_from_rollouts(grid, test, prefix_len, &generated)
}

/// Generated index rows (zero temperature) following the first `prefix_len`
/// states of each test trajectory.
pub fn rollouts<F: Forecaster + ?Sized>(
    model: &F,
    grid: &GridSpec,
    test: &TrajectorySet,
    prefix_len: usize,
    horizon: usize,
) -> Result<Vec<MultiIndexSeq>> {
    if prefix_len == 0 {
        return Err(Error::invalid("prefix_len must be >= 1"));
    }
    let needed = prefix_len + horizon;
    if test.steps < needed {
        return Err(Error::TooShort {
            needed,
            have: test.steps,
        });
    }
    let d = test.dim;
    let ids: Vec<usize> = (0..test.count).collect();
    let mut out = Vec::with_capacity(test.count);
    for chunk in ids.chunks(ROLLOUT_BATCH) {
        let prefixes: Vec<MultiIndexSeq> = chunk
            .iter()
            .map(|&i| grid.encode_trajectory(&test.trajectory(i)[..prefix_len * d]))
            .collect();
        out.extend(rollout(model, &prefixes, &vec![0; chunk.len()], horizon, 0.0, 0)?);
    }
    Ok(out)
}

/// RMSE of decoded rollouts, one per test trajectory, against the states
/// that follow each prefix.
pub fn rmse_from_rollouts(
    grid: &GridSpec,
    test: &TrajectorySet,
    prefix_len: usize,
    generated: &[MultiIndexSeq],
) -> Result<RmseCurve> {
    if generated.len() != test.count {
        return Err(Error::Shape(format!(
            "{} rollouts for {} trajectories",
            generated.len(),
            test.count
        )));
    }
    let horizon = generated.first().map_or(0, |g| g.len());
    if test.steps < prefix_len + horizon {
        return Err(Error::TooShort {
            needed: prefix_len + horizon,
            have: test.steps,
        });
    }
    let d = test.dim;
    let mut sq = vec![0.0; horizon];
    for (i, seq) in generated.iter().enumerate() {
        if seq.len() != horizon {
            return Err(Error::Shape("rollouts differ in length".into()));
        }
        let states = seq.decode(grid)?;
        for g in 0..horizon {
            let truth = test.state(i, prefix_len + g);
            sq[g] += truth
                .iter()
                .zip(&states[g * d..(g + 1) * d])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
    }
    let n = test.count as f64;
    Ok(RmseCurve {
        times: (1..=horizon).map(|g| g as f64 * test.tau).collect(),
        rmse: sq.into_iter().map(|s| (s / n).sqrt()).collect(),
        n_trajectories: test.count,
        prefix_len,
    })
}

/// Teacher-forced accuracy over non-overlapping windows of `context_len + 1`
/// states, at most `max_windows` of them (in trajectory order).
pub fn one_step_accuracy<F: Forecaster + ?Sized>(
    model: &F,
    grid: &GridSpec,
    test: &TrajectorySet,
    max_windows: usize,
) -> Result<Vec<DimAccuracy>> {
    let ctx = model.context_len();
    let seqs = grid.encode_set(test)?;
    let mut windows = Vec::new();
    'outer: for (i, seq) in seqs.iter().enumerate() {
        let mut start = 0;
        while start + 1 < seq.len() {
            if windows.len() >= max_windows {
                break 'outer;
            }
            let end = (start + ctx + 1).min(seq.len());
            windows.push((i, start, end));
            start = end - 1;
            if end == seq.len() {
                break;
            }
        }
    }
    // windows cut short at a trajectory end are evaluated one by one so that
    // every batch shares a length
    let mut tally = AccuracyTally::new(model.dim());
    let full: Vec<_> = windows.iter().filter(|w| w.2 - w.1 == ctx + 1).collect();
    let partial: Vec<_> = windows.iter().filter(|w| w.2 - w.1 != ctx + 1).collect();
    for group in full.chunks(ROLLOUT_BATCH).chain(partial.chunks(1)) {
        let inputs: Vec<MultiIndexSeq> = group.iter().map(|w| seqs[w.0].window(w.1, w.2 - 1)).collect();
        let targets: Vec<MultiIndexSeq> = group.iter().map(|w| seqs[w.0].window(w.1 + 1, w.2)).collect();
        let origins: Vec<usize> = group.iter().map(|w| w.1).collect();
        tally.add(model, &inputs, &targets, &origins)?;
    }
    Ok(tally.finish())
}

/// Accuracy of teacher-forced predictions on explicit windows.
pub fn accuracy_on_windows<F: Forecaster + ?Sized>(
    model: &F,
    inputs: &[MultiIndexSeq],
    targets: &[MultiIndexSeq],
    origins: &[usize],
) -> Result<Vec<DimAccuracy>> {
    let mut tally = AccuracyTally::new(model.dim());
    let ids: Vec<usize> = (0..inputs.len()).collect();
    for chunk in ids.chunks(ROLLOUT_BATCH) {
        let a: Vec<_> = chunk.iter().map(|&i| inputs[i].clone()).collect();
        let b: Vec<_> = chunk.iter().map(|&i| targets[i].clone()).collect();
        let o: Vec<_> = chunk.iter().map(|&i| origins[i]).collect();
        tally.add(model, &a, &b, &o)?;
    }
    Ok(tally.finish())
}

struct AccuracyTally {
    exact: Vec<usize>,
    near: Vec<usize>,
    total: usize,
}

impl AccuracyTally {
    fn new(d: usize) -> Self {
        AccuracyTally {
            exact: vec![0; d],
            near: vec![0; d],
            total: 0,
        }
    }

    fn add<F: Forecaster + ?Sized>(
        &mut self,
        model: &F,
        inputs: &[MultiIndexSeq],
        targets: &[MultiIndexSeq],
        origins: &[usize],
    ) -> Result<()> {
        let logits = model.teacher_forced(inputs, origins)?;
        for (b, tgt) in targets.iter().enumerate() {
            for t in 0..logits.len {
                for k in 0..logits.dim {
                    let pred = argmax(logits.head(b, t, k));
                    let truth = tgt.row(t)[k];
                    if pred == truth {
                        self.exact[k] += 1;
                    }
                    if pred.abs_diff(truth) <= 1 {
                        self.near[k] += 1;
                    }
                }
                self.total += 1;
            }
        }
        Ok(())
    }

    fn finish(self) -> Vec<DimAccuracy> {
        let n = self.total.max(1) as f64;
        self.exact
            .iter()
            .zip(&self.near)
            .map(|(&e, &w)| DimAccuracy {
                exact: e as f64 / n,
                within_one: w as f64 / n,
            })
            .collect()
    }
}

/// Fraction of decoded states that lie in the grid box. Rows whose indices
/// cannot be decoded count as outside.
pub fn containment_of(grid: &GridSpec, seqs: &[MultiIndexSeq]) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    for seq in seqs {
        for t in 0..seq.len() {
            total += 1;
            if let Ok(x) = grid.decode(seq.row(t)) {
                if grid.contains(&x) {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        inside as f64 / total as f64
    }
}

/// Generates `horizon` steps from each prefix and reports the contained
/// fraction. Exactly 1.0 for any model whose indices stay in range.
pub fn containment_fraction<F: Forecaster + ?Sized>(
    model: &F,
    grid: &GridSpec,
    prefixes: &[MultiIndexSeq],
    horizon: usize,
) -> Result<f64> {
    if horizon == 0 || prefixes.is_empty() {
        return Ok(1.0);
    }
    let mut all = Vec::with_capacity(prefixes.len());
    for chunk in prefixes.chunks(ROLLOUT_BATCH) {
        all.extend(rollout(model, chunk, &vec![0; chunk.len()], horizon, 0.0, 0)?);
    }
    Ok(containment_of(grid, &all))
}

/// Model error and true-system separation on a shared time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub times: Vec<f64>,
    pub model_rmse: Vec<f64>,
    pub real_divergence: Vec<f64>,
    pub model_saturation: f64,
    pub divergence_saturation: f64,
    /// `model_saturation / divergence_saturation`.
    pub ratio: f64,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,model_rmse,real_divergence\n");
        for i in 0..self.times.len() {
            let _ = writeln!(s, "{},{},{}", self.times[i], self.model_rmse[i], self.real_divergence[i]);
        }
        s
    }
}

/// Aligns `rmse.times[g] = (g + 1) tau` with `divergence.times[g + 1]`. Both
/// saturation levels come from the aligned samples.
pub fn compare(rmse: &RmseCurve, divergence: &DivergenceCurve) -> Result<CompareReport> {
    let n = rmse.rmse.len().min(divergence.rms_separation.len().saturating_sub(1));
    if n == 0 {
        return Err(Error::invalid("curves share no time samples"));
    }
    let mut times = Vec::with_capacity(n);
    for g in 0..n {
        let (a, b) = (rmse.times[g], divergence.times[g + 1]);
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            return Err(Error::Shape(format!("time axes disagree at sample {g}: {a} vs {b}")));
        }
        times.push(a);
    }
    let model_rmse = rmse.rmse[..n].to_vec();
    let real_divergence = divergence.rms_separation[1..=n].to_vec();
    let model_saturation = saturation_level(&model_rmse);
    let divergence_saturation = saturation_level(&real_divergence);
    Ok(CompareReport {
        times,
        model_rmse,
        real_divergence,
        model_saturation,
        divergence_saturation,
        ratio: model_saturation / divergence_saturation,
    })
}

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::trajectory_rng;
use super::{integrate, VectorField};
use crate::error::{Error, Result};

/// RMS separation of perturbed trajectory pairs over time, with a log-linear
/// growth-rate fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCurve {
    pub times: Vec<f64>,
    pub rms_separation: Vec<f64>,
    /// Least-squares slope of `ln(rms)` against time over the initial growth
    /// window. NaN when fewer than two positive samples are available.
    pub fitted_exponent: f64,
}

/// `pairs` pairs all based at `x0`, each with an independent random
/// perturbation of norm `delta`.
#[allow(clippy::too_many_arguments)]
pub fn divergence_curve<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    delta: f64,
    tau: f64,
    steps: usize,
    pairs: usize,
    seed: u64,
    substeps: usize,
) -> Result<DivergenceCurve> {
    if pairs == 0 {
        return Err(Error::invalid("pairs must be >= 1"));
    }
    let bases: Vec<Vec<f64>> = (0..pairs).map(|_| x0.to_vec()).collect();
    divergence_from_bases(field, &bases, delta, tau, steps, seed, substeps)
}

/// One pair per base state; perturbation directions are Gaussian, scaled to
/// norm `delta`, drawn from stream `j` of `seed` for pair `j`.
pub fn divergence_from_bases<F: VectorField + ?Sized>(
    field: &F,
    bases: &[Vec<f64>],
    delta: f64,
    tau: f64,
    steps: usize,
    seed: u64,
    substeps: usize,
) -> Result<DivergenceCurve> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let perturbations: Vec<Vec<f64>> = bases
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let mut rng = trajectory_rng(seed, j);
            loop {
                let v: Vec<f64> = (0..b.len()).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    return v.into_iter().map(|x| x * delta / norm).collect();
                }
            }
        })
        .collect();
    divergence_with_perturbations(field, bases, &perturbations, tau, steps, substeps)
}

/// Explicit perturbation vectors, one per base. Zero perturbations are allowed.
pub fn divergence_with_perturbations<F: VectorField + ?Sized>(
    field: &F,
    bases: &[Vec<f64>],
    perturbations: &[Vec<f64>],
    tau: f64,
    steps: usize,
    substeps: usize,
) -> Result<DivergenceCurve> {
    if bases.is_empty() || bases.len() != perturbations.len() {
        return Err(Error::Shape("need one perturbation per base state".into()));
    }
    let d = field.dim();
    let mut sq_sum = vec![0.0; steps + 1];
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (base, pert) in bases.iter().zip(perturbations) {
        if pert.len() != d {
            return Err(Error::Shape("perturbation width does not match system".into()));
        }
        let shifted: Vec<f64> = base.iter().zip(pert).map(|(a, b)| a + b).collect();
        let a = integrate(field, base, tau, steps, substeps)?;
        let b = integrate(field, &shifted, tau, steps, substeps)?;
        for t in 0..=steps {
            let row_a = &a[t * d..(t + 1) * d];
            let row_b = &b[t * d..(t + 1) * d];
            let s2: f64 = row_a.iter().zip(row_b).map(|(x, y)| (x - y).powi(2)).sum();
            sq_sum[t] += s2;
            for k in 0..d {
                lo[k] = lo[k].min(row_a[k]);
                hi[k] = hi[k].max(row_a[k]);
            }
        }
    }
    let n = bases.len() as f64;
    // the first sample is computed from the perturbation itself so that it is
    // exact rather than subject to cancellation in (x + p) - x
    sq_sum[0] = perturbations
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let rms: Vec<f64> = sq_sum.iter().map(|s| (s / n).sqrt()).collect();
    let times: Vec<f64> = (0..=steps).map(|t| t as f64 * tau).collect();
    let diameter = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (h - l).powi(2))
        .sum::<f64>()
        .sqrt();
    let fitted_exponent = fit_growth_rate(&times, &rms, diameter);
    Ok(DivergenceCurve {
        times,
        rms_separation: rms,
        fitted_exponent,
    })
}

/// Fit window: the first 20% of steps, cut short once separation exceeds 10%
/// of the attractor diameter.
fn fit_growth_rate(times: &[f64], rms: &[f64], diameter: f64) -> f64 {
    let steps = times.len() - 1;
    let window_end = ((steps as f64 * 0.2).floor() as usize).max(1);
    let threshold = 0.1 * diameter;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in 0..=window_end.min(steps) {
        if t > 0 && diameter > 0.0 && rms[t] > threshold {
            break;
        }
        if rms[t] > 0.0 {
            xs.push(times[t]);
            ys.push(rms[t].ln());
        }
    }
    if xs.len() < 2 {
        // separation left the small-scale regime immediately; use the first two samples
        xs.clear();
        ys.clear();
        for t in 0..=1.min(steps) {
            if rms[t] > 0.0 {
                xs.push(times[t]);
                ys.push(rms[t].ln());
            }
        }
    }
    if xs.len() < 2 {
        return f64::NAN;
    }
    least_squares_slope(&xs, &ys)
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

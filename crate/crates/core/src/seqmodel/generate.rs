use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FactorizedLogits, SeqModel};
use crate::error::{Error, Result};
use crate::grid::MultiIndexSeq;

/// Anything that predicts factorized next-state logits from a window of
/// multi-indices.
///
/// `origins[b]` is the absolute step, in the timeline of sequence `b`, of the
/// first row of `windows[b]`. Learned models ignore it; evaluation stubs use
/// it to look up ground truth.
pub trait Forecaster {
    fn dim(&self) -> usize;
    fn axis_len(&self) -> usize;
    fn context_len(&self) -> usize;

    /// Logits `(batch, d, M)` for the state after the last row of each window.
    fn next_logits(&self, windows: &[MultiIndexSeq], origins: &[usize]) -> Result<Vec<f64>>;

    /// Logits at every position of every window (teacher forcing).
    fn teacher_forced(&self, windows: &[MultiIndexSeq], origins: &[usize]) -> Result<FactorizedLogits>;
}

impl Forecaster for SeqModel {
    fn dim(&self) -> usize {
        self.config.system_dim
    }

    fn axis_len(&self) -> usize {
        self.grid.axis_len
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn next_logits(&self, windows: &[MultiIndexSeq], _origins: &[usize]) -> Result<Vec<f64>> {
        self.forward_last(windows)
    }

    fn teacher_forced(&self, windows: &[MultiIndexSeq], _origins: &[usize]) -> Result<FactorizedLogits> {
        self.forward(windows)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Batched autoregressive generation. All prefixes must share one length.
/// Once history exceeds the context length only the most recent
/// `context_len` rows are fed back. Returns the `steps` generated rows per
/// prefix.
pub fn rollout<F: Forecaster + ?Sized>(
    model: &F,
    prefixes: &[MultiIndexSeq],
    origins: &[usize],
    steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<MultiIndexSeq>> {
    if prefixes.is_empty() || prefixes.len() != origins.len() {
        return Err(Error::invalid("need one origin per prefix and at least one prefix"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be >= 0, got {temperature}")));
    }
    let len = prefixes[0].len();
    if len == 0 {
        return Err(Error::invalid("empty prefix"));
    }
    let (d, m, ctx) = (model.dim(), model.axis_len(), model.context_len());
    for p in prefixes {
        if p.len() != len || p.dim != d {
            return Err(Error::Shape("prefixes must share length and dimension".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: Vec<Vec<usize>> = prefixes.iter().map(|p| p.indices.clone()).collect();
    for _ in 0..steps {
        let hist_len = history[0].len() / d;
        let w = hist_len.min(ctx);
        let windows: Vec<MultiIndexSeq> = history
            .iter()
            .map(|h| MultiIndexSeq {
                indices: h[(hist_len - w) * d..].to_vec(),
                dim: d,
                axis_len: m,
            })
            .collect();
        let starts: Vec<usize> = origins.iter().map(|o| o + hist_len - w).collect();
        let logits = model.next_logits(&windows, &starts)?;
        if logits.len() != prefixes.len() * d * m {
            return Err(Error::Shape("forecaster returned logits of the wrong size".into()));
        }
        for (b, h) in history.iter_mut().enumerate() {
            for k in 0..d {
                let l = &logits[(b * d + k) * m..(b * d + k + 1) * m];
                let i = if temperature == 0.0 {
                    argmax(l)
                } else {
                    sample(l, temperature, &mut rng)
                };
                h.push(i);
            }
        }
    }
    Ok(history
        .into_iter()
        .map(|h| MultiIndexSeq {
            indices: h[len * d..].to_vec(),
            dim: d,
            axis_len: m,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -2.0]), 0);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0, (3.0f64).ln()];
        let n = 20_000;
        let ones = (0..n).filter(|_| sample(&logits, 1.0, &mut rng) == 1).count();
        let p = ones as f64 / n as f64;
        assert!((p - 0.75).abs() < 0.02, "{p}");
    }
}

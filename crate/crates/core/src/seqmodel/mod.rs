//! Causal transformer decoder over multi-index sequences.
//!
//! Each position is embedded through the tensor coding layer plus a learned
//! positional row, passed through a pre-norm decoder stack, and projected by
//! `d` independent classification heads, one per physical dimension. The
//! next-state distribution is the product of the `d` per-head softmaxes, so
//! the training loss is the sum of per-head cross-entropies.

mod generate;
mod layers;
mod linalg;
mod params;

pub use generate::{argmax, rollout, Forecaster};
pub use layers::{Block, Dims, LayerNorm, Linear};
pub use params::{group_of, Head, Params, TensorView};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, MultiIndexSeq};
use crate::ttcoding::{plan_factors, EmbedTrace, TTCores};
use layers::{BlockCache, LnCache};
use linalg::{matmul_a_bt, matmul_at_b, matmul};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    /// Current grid axis length `M`.
    pub grid_axis: usize,
    pub system_dim: usize,
    pub tt_rank: usize,
    pub seed: u64,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Output factors of the tensor coding layer; planned from `embed_dim`
    /// when absent.
    #[serde(default)]
    pub factors: Option<Vec<usize>>,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layers, heads and embed_dim must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be >= 2".into()));
        }
        if self.grid_axis < 2 || self.system_dim == 0 || self.tt_rank == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "grid_axis >= 2, system_dim >= 1, tt_rank >= 1, ffn_mult >= 1 required".into(),
            ));
        }
        if let Some(f) = &self.factors {
            if f.len() != self.system_dim || f.iter().product::<usize>() != self.embed_dim {
                return Err(Error::Config(format!(
                    "factors {f:?} must have {} entries multiplying to {}",
                    self.system_dim, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_factors(&self) -> Result<Vec<usize>> {
        match &self.factors {
            Some(f) => Ok(f.clone()),
            None => plan_factors(self.system_dim, self.embed_dim),
        }
    }
}

/// Logits of the factorized next-state distribution, `(batch, len, d, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLogits {
    pub data: Vec<f64>,
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub axis_len: usize,
}

impl FactorizedLogits {
    pub fn head(&self, b: usize, t: usize, k: usize) -> &[f64] {
        let o = ((b * self.len + t) * self.dim + k) * self.axis_len;
        &self.data[o..o + self.axis_len]
    }

    /// Softmax of one head at one position.
    pub fn probs(&self, b: usize, t: usize, k: usize) -> Vec<f64> {
        softmax(self.head(b, t, k))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Which positions and dimensions contribute to the loss. `None` means all.
#[derive(Debug, Clone, Default)]
pub struct LossMask {
    /// `(batch, len)` flags.
    pub positions: Option<Vec<bool>>,
    /// One flag per dimension.
    pub dims: Option<Vec<bool>>,
}

fn check_targets(logits: &FactorizedLogits, targets: &[MultiIndexSeq]) -> Result<()> {
    if targets.len() != logits.batch {
        return Err(Error::Shape(format!(
            "{} target sequences for a batch of {}",
            targets.len(),
            logits.batch
        )));
    }
    for t in targets {
        if t.len() != logits.len || t.dim != logits.dim {
            return Err(Error::Shape(format!(
                "target of shape ({}, {}) for logits of shape ({}, {})",
                t.len(),
                t.dim,
                logits.len,
                logits.dim
            )));
        }
        if let Some(&i) = t.indices.iter().find(|&&i| i >= logits.axis_len) {
            return Err(Error::IndexOutOfRange {
                dim: 0,
                index: i,
                axis_len: logits.axis_len,
            });
        }
    }
    Ok(())
}

/// Mean over positions of the sum over dimensions of per-head cross-entropy.
pub fn loss(logits: &FactorizedLogits, targets: &[MultiIndexSeq]) -> Result<f64> {
    loss_and_grad(logits, targets, &LossMask::default()).map(|(l, _)| l)
}

pub fn loss_masked(logits: &FactorizedLogits, targets: &[MultiIndexSeq], mask: &LossMask) -> Result<f64> {
    loss_and_grad(logits, targets, mask).map(|(l, _)| l)
}

/// Standalone cross-entropy of each head, averaged over positions.
pub fn head_losses(logits: &FactorizedLogits, targets: &[MultiIndexSeq]) -> Result<Vec<f64>> {
    check_targets(logits, targets)?;
    let n = (logits.batch * logits.len) as f64;
    Ok((0..logits.dim)
        .map(|k| {
            let mut total = 0.0;
            for (b, tgt) in targets.iter().enumerate() {
                for t in 0..logits.len {
                    let l = logits.head(b, t, k);
                    total += log_sum_exp(l) - l[tgt.row(t)[k]];
                }
            }
            total / n
        })
        .collect())
}

/// Loss and its gradient with respect to the logits.
pub fn loss_and_grad(
    logits: &FactorizedLogits,
    targets: &[MultiIndexSeq],
    mask: &LossMask,
) -> Result<(f64, Vec<f64>)> {
    check_targets(logits, targets)?;
    let FactorizedLogits {
        batch,
        len,
        dim,
        axis_len,
        ..
    } = *logits;
    if let Some(p) = &mask.positions {
        if p.len() != batch * len {
            return Err(Error::Shape("position mask does not match batch".into()));
        }
    }
    if let Some(d) = &mask.dims {
        if d.len() != dim {
            return Err(Error::Shape("dimension mask does not match heads".into()));
        }
    }
    let pos_on = |r: usize| mask.positions.as_ref().map_or(true, |p| p[r]);
    let dim_on = |k: usize| mask.dims.as_ref().map_or(true, |d| d[k]);
    let count = (0..batch * len).filter(|&r| pos_on(r)).count();
    let mut grad = vec![0.0; logits.data.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (b, tgt) in targets.iter().enumerate() {
        for t in 0..len {
            let r = b * len + t;
            if !pos_on(r) {
                continue;
            }
            for k in 0..dim {
                if !dim_on(k) {
                    continue;
                }
                let o = (r * dim + k) * axis_len;
                let l = &logits.data[o..o + axis_len];
                let target = tgt.row(t)[k];
                let lse = log_sum_exp(l);
                total += lse - l[target];
                let g = &mut grad[o..o + axis_len];
                for c in 0..axis_len {
                    g[c] = (l[c] - lse).exp() * inv;
                }
                g[target] -= inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Decoder with a tensor-coded input layer and per-dimension heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub params: Params,
}

struct Trace {
    dims: Dims,
    tokens: Vec<Vec<usize>>,
    embeds: Vec<EmbedTrace>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    hidden: Vec<f64>,
}

impl SeqModel {
    pub fn new(config: ModelConfig, grid: GridSpec) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        if grid.axis_len != config.grid_axis || grid.dim() != config.system_dim {
            return Err(Error::Config(format!(
                "grid ({} dims, M={}) does not match model config ({} dims, M={})",
                grid.dim(),
                grid.axis_len,
                config.system_dim,
                config.grid_axis
            )));
        }
        let width = config.embed_dim;
        let factors = config.resolved_factors()?;
        let tt = TTCores::init(config.system_dim, config.grid_axis, &factors, config.tt_rank, config.seed)?;

        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(s);
            rng
        };
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut rng = stream(1);
        let positional = (0..config.context_len * width)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let mut rng = stream(2);
        let blocks = (0..config.layers)
            .map(|_| Block::random(width, config.ffn_mult * width, config.layers, &mut rng))
            .collect();
        let mut rng = stream(3);
        let heads = (0..config.system_dim)
            .map(|_| Head {
                w: (0..config.grid_axis * width).map(|_| normal.sample(&mut rng)).collect(),
                b: vec![0.0; config.grid_axis],
            })
            .collect();
        Ok(SeqModel {
            params: Params {
                tt,
                positional,
                blocks,
                final_ln: LayerNorm::new(width),
                heads,
            },
            config,
            grid,
        })
    }

    /// Zero-valued parameters with this model's shapes.
    pub fn skeleton(config: ModelConfig, grid: GridSpec) -> Result<Self> {
        let mut m = SeqModel::new(config, grid)?;
        m.params = m.params.zeros_like();
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.config.system_dim
    }

    pub fn axis_len(&self) -> usize {
        self.grid.axis_len
    }

    pub fn width(&self) -> usize {
        self.config.embed_dim
    }

    fn check_batch(&self, batch: &[MultiIndexSeq]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if len > self.config.context_len {
            return Err(Error::SequenceTooLong {
                len,
                context_len: self.config.context_len,
            });
        }
        let m = self.axis_len();
        for s in batch {
            if s.len() != len || s.dim != self.dim() {
                return Err(Error::Shape("batch sequences must share length and dimension".into()));
            }
            for (p, &i) in s.indices.iter().enumerate() {
                if i >= m {
                    return Err(Error::IndexOutOfRange {
                        dim: p % s.dim,
                        index: i,
                        axis_len: m,
                    });
                }
            }
        }
        Ok(len)
    }

    fn trunk(&self, batch: &[MultiIndexSeq]) -> Result<Trace> {
        let len = self.check_batch(batch)?;
        let width = self.width();
        let dims = Dims {
            batch: batch.len(),
            len,
            width,
            heads: self.config.heads,
        };
        let rows = batch.len() * len;
        let mut x = vec![0.0; rows * width];
        let mut tokens = Vec::with_capacity(rows);
        let mut embeds = Vec::with_capacity(rows);
        for (b, seq) in batch.iter().enumerate() {
            for t in 0..len {
                let idx = seq.row(t).to_vec();
                let mut trace = EmbedTrace::default();
                self.params.tt.embed_traced(&idx, &mut trace);
                let e = TTCores::trace_output(&trace);
                let pos = &self.params.positional[t * width..(t + 1) * width];
                let out = &mut x[(b * len + t) * width..(b * len + t + 1) * width];
                for j in 0..width {
                    out[j] = e[j] + pos[j];
                }
                tokens.push(idx);
                embeds.push(trace);
            }
        }
        let mut blocks = Vec::with_capacity(self.params.blocks.len());
        for block in &self.params.blocks {
            let (y, cache) = block.forward(&x, dims);
            x = y;
            blocks.push(cache);
        }
        let (hidden, final_ln) = self.params.final_ln.forward(&x);
        Ok(Trace {
            dims,
            tokens,
            embeds,
            blocks,
            final_ln,
            hidden,
        })
    }

    /// Head logits for the given hidden rows, laid out `(row, d, M)`.
    fn heads_forward(&self, hidden: &[f64], rows: usize) -> Vec<f64> {
        let (d, m, width) = (self.dim(), self.axis_len(), self.width());
        let mut out = vec![0.0; rows * d * m];
        let mut tmp = vec![0.0; rows * m];
        for (k, head) in self.params.heads.iter().enumerate() {
            matmul_a_bt(hidden, &head.w, &mut tmp, rows, width, m, false);
            for r in 0..rows {
                let dst = &mut out[(r * d + k) * m..(r * d + k + 1) * m];
                for c in 0..m {
                    dst[c] = tmp[r * m + c] + head.b[c];
                }
            }
        }
        out
    }

    /// Teacher-forced logits at every position.
    pub fn forward(&self, batch: &[MultiIndexSeq]) -> Result<FactorizedLogits> {
        let trace = self.trunk(batch)?;
        let rows = trace.dims.batch * trace.dims.len;
        Ok(FactorizedLogits {
            data: self.heads_forward(&trace.hidden, rows),
            batch: trace.dims.batch,
            len: trace.dims.len,
            dim: self.dim(),
            axis_len: self.axis_len(),
        })
    }

    /// Logits at the last position of each sequence, `(batch, d, M)`.
    pub fn forward_last(&self, batch: &[MultiIndexSeq]) -> Result<Vec<f64>> {
        let trace = self.trunk(batch)?;
        let (len, width) = (trace.dims.len, self.width());
        let mut last = Vec::with_capacity(batch.len() * width);
        for b in 0..batch.len() {
            let r = b * len + len - 1;
            last.extend_from_slice(&trace.hidden[r * width..(r + 1) * width]);
        }
        Ok(self.heads_forward(&last, batch.len()))
    }

    /// Loss and gradients of every parameter. Non-finite gradients are
    /// reported with the name of the first affected parameter group.
    pub fn gradients(
        &self,
        inputs: &[MultiIndexSeq],
        targets: &[MultiIndexSeq],
        mask: Option<&LossMask>,
    ) -> Result<(f64, Params)> {
        let trace = self.trunk(inputs)?;
        let dims = trace.dims;
        let rows = dims.batch * dims.len;
        let logits = FactorizedLogits {
            data: self.heads_forward(&trace.hidden, rows),
            batch: dims.batch,
            len: dims.len,
            dim: self.dim(),
            axis_len: self.axis_len(),
        };
        let default_mask = LossMask::default();
        let (loss, dlogits) = loss_and_grad(&logits, targets, mask.unwrap_or(&default_mask))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss });
        }
        let mut grads = self.params.zeros_like();
        self.backward(&trace, &dlogits, &mut grads);
        if let Some(group) = grads.first_non_finite_group() {
            return Err(Error::NonFiniteGradient {
                group: group.to_string(),
            });
        }
        Ok((loss, grads))
    }

    fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut Params) {
        let dims = trace.dims;
        let rows = dims.batch * dims.len;
        let (d, m, width) = (self.dim(), self.axis_len(), self.width());

        let mut dhidden = vec![0.0; rows * width];
        let mut dl = vec![0.0; rows * m];
        for (k, head) in self.params.heads.iter().enumerate() {
            let gh = &mut grads.heads[k];
            for r in 0..rows {
                let src = &dlogits[(r * d + k) * m..(r * d + k + 1) * m];
                dl[r * m..(r + 1) * m].copy_from_slice(src);
                for c in 0..m {
                    gh.b[c] += src[c];
                }
            }
            matmul_at_b(&dl, &trace.hidden, &mut gh.w, m, rows, width, true);
            matmul(&dl, &head.w, &mut dhidden, rows, m, width, true);
        }

        let mut dx = self
            .params
            .final_ln
            .backward(&trace.final_ln, &dhidden, &mut grads.final_ln);
        for (l, block) in self.params.blocks.iter().enumerate().rev() {
            dx = block.backward(&trace.blocks[l], &dx, dims, &mut grads.blocks[l]);
        }

        for r in 0..rows {
            let t = r % dims.len;
            let g = &dx[r * width..(r + 1) * width];
            for (p, v) in grads.params_positional_row(t, width).iter_mut().zip(g) {
                *p += v;
            }
            self.params
                .tt
                .embed_backward(&trace.tokens[r], &trace.embeds[r], g, &mut grads.tt);
        }
    }

    /// Autoregressive continuation of one prefix. Temperature 0 takes the
    /// per-head argmax (lowest index on ties).
    pub fn generate(
        &self,
        prefix: &MultiIndexSeq,
        steps: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<MultiIndexSeq> {
        let mut out = rollout(self, std::slice::from_ref(prefix), &[0], steps, temperature, seed)?;
        Ok(out.pop().unwrap())
    }
}

impl Params {
    fn params_positional_row(&mut self, t: usize, width: usize) -> &mut [f64] {
        &mut self.positional[t * width..(t + 1) * width]
    }
}

#[cfg(test)]
pub(crate) mod tests;

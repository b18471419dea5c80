//! Decoder building blocks with explicit forward caches and backward passes.
//!
//! All activations are row-major `(rows, width)` buffers where `rows` is
//! `batch * len`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{matmul, matmul_a_bt, matmul_at_b};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `y = x W + b`, `W: (n_in, n_out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    pub fn random<R: Rng>(n_in: usize, n_out: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        let mut l = Linear::zeros(n_in, n_out);
        l.w.iter_mut().for_each(|v| *v = normal.sample(rng));
        l
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.n_out);
        for _ in 0..rows {
            y.extend_from_slice(&self.b);
        }
        matmul(x, &self.w, &mut y, rows, self.n_in, self.n_out, true);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        matmul_at_b(x, dy, &mut grad.w, self.n_in, rows, self.n_out, true);
        for row in dy.chunks(self.n_out) {
            for (g, v) in grad.b.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; rows * self.n_in];
        matmul_a_bt(dy, &self.w, &mut dx, rows, self.n_out, self.n_in, false);
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let dim = self.gamma.len();
        let rows = x.len() / dim;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * dim..(r + 1) * dim];
            let mean = xr.iter().sum::<f64>() / dim as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..dim {
                let h = (xr[j] - mean) * s;
                xhat[r * dim + j] = h;
                y[r * dim + j] = h * self.gamma[j] + self.beta[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let dim = self.gamma.len();
        let mut dx = vec![0.0; dy.len()];
        let mut g = vec![0.0; dim];
        for (r, &s) in cache.rstd.iter().enumerate() {
            let xh = &cache.xhat[r * dim..(r + 1) * dim];
            let dyr = &dy[r * dim..(r + 1) * dim];
            let (mut mean_g, mut mean_gx) = (0.0, 0.0);
            for j in 0..dim {
                grad.gamma[j] += dyr[j] * xh[j];
                grad.beta[j] += dyr[j];
                g[j] = dyr[j] * self.gamma[j];
                mean_g += g[j];
                mean_gx += g[j] * xh[j];
            }
            mean_g /= dim as f64;
            mean_gx /= dim as f64;
            for j in 0..dim {
                dx[r * dim + j] = s * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Pre-norm decoder block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub out: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention weights, `(batch, heads, len, len)`, zero above the diagonal.
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Shape of one forward call.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub heads: usize,
}

impl Dims {
    fn rows(&self) -> usize {
        self.batch * self.len
    }
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

impl Block {
    pub fn random<R: Rng>(width: usize, ffn: usize, layers: usize, rng: &mut R) -> Self {
        let std = 0.02;
        let resid_std = std / (2.0 * layers as f64).sqrt();
        Block {
            ln1: LayerNorm::new(width),
            qkv: Linear::random(width, 3 * width, std, rng),
            proj: Linear::random(width, width, resid_std, rng),
            ln2: LayerNorm::new(width),
            fc: Linear::random(width, ffn, std, rng),
            out: Linear::random(ffn, width, resid_std, rng),
        }
    }

    pub fn zeros(width: usize, ffn: usize) -> Self {
        Block {
            ln1: LayerNorm::zeros(width),
            qkv: Linear::zeros(width, 3 * width),
            proj: Linear::zeros(width, width),
            ln2: LayerNorm::zeros(width),
            fc: Linear::zeros(width, ffn),
            out: Linear::zeros(ffn, width),
        }
    }

    pub fn forward(&self, x: &[f64], dims: Dims) -> (Vec<f64>, BlockCache) {
        let rows = dims.rows();
        let w = dims.width;
        let (h1, ln1) = self.ln1.forward(x);
        let qkv = self.qkv.forward(&h1, rows);
        let (att, probs) = causal_attention(&qkv, dims);
        let proj = self.proj.forward(&att, rows);
        let mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let (h2, ln2) = self.ln2.forward(&mid);
        let pre = self.fc.forward(&h2, rows);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let out = self.out.forward(&act, rows);
        let y: Vec<f64> = mid.iter().zip(&out).map(|(a, b)| a + b).collect();
        debug_assert_eq!(y.len(), rows * w);
        (
            y,
            BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                att,
                ln2,
                h2,
                pre,
                act,
            },
        )
    }

    /// Returns `dx` given `dy`; parameter gradients accumulate into `grad`.
    pub fn backward(&self, cache: &BlockCache, dy: &[f64], dims: Dims, grad: &mut Block) -> Vec<f64> {
        let rows = dims.rows();
        let mut dact = self.out.backward(&cache.act, dy, rows, &mut grad.out);
        for (g, &u) in dact.iter_mut().zip(&cache.pre) {
            *g *= gelu_grad(u);
        }
        let dh2 = self.fc.backward(&cache.h2, &dact, rows, &mut grad.fc);
        let mut dmid = self.ln2.backward(&cache.ln2, &dh2, &mut grad.ln2);
        for (a, b) in dmid.iter_mut().zip(dy) {
            *a += b;
        }

        let datt = self.proj.backward(&cache.att, &dmid, rows, &mut grad.proj);
        let dqkv = causal_attention_backward(&cache.qkv, &cache.probs, &datt, dims);
        let dh1 = self.qkv.backward(&cache.h1, &dqkv, rows, &mut grad.qkv);
        let mut dx = self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1);
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }
        dx
    }
}

/// Multi-head attention where position `i` attends to positions `j <= i`
/// only. Entries with `j > i` are never read, so later tokens cannot affect
/// earlier outputs even through rounding.
fn causal_attention(qkv: &[f64], dims: Dims) -> (Vec<f64>, Vec<f64>) {
    let Dims {
        batch,
        len,
        width,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut att = vec![0.0; batch * len * width];
    let mut probs = vec![0.0; batch * heads * len * len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * len * len;
            for i in 0..len {
                let q = &qkv[(b * len + i) * stride + h * hd..][..hd];
                let prow = &mut probs[p_base + i * len..p_base + (i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[(b * len + j) * stride + width + h * hd..][..hd];
                    let s = q.iter().zip(k).map(|(a, c)| a * c).sum::<f64>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for p in prow[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let o = &mut att[(b * len + i) * width + h * hd..][..hd];
                for j in 0..=i {
                    prow[j] /= z;
                    let v = &qkv[(b * len + j) * stride + 2 * width + h * hd..][..hd];
                    for (acc, vv) in o.iter_mut().zip(v) {
                        *acc += prow[j] * vv;
                    }
                }
            }
        }
    }
    (att, probs)
}

fn causal_attention_backward(qkv: &[f64], probs: &[f64], datt: &[f64], dims: Dims) -> Vec<f64> {
    let Dims {
        batch,
        len,
        width,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut dqkv = vec![0.0; qkv.len()];
    let mut dp = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * len * len;
            for i in 0..len {
                let prow = &probs[p_base + i * len..p_base + (i + 1) * len];
                let dout = &datt[(b * len + i) * width + h * hd..][..hd];
                // dP_ij = dO_i . v_j ; dv_j += P_ij dO_i
                let mut dot = 0.0;
                for j in 0..=i {
                    let vo = (b * len + j) * stride + 2 * width + h * hd;
                    let v = &qkv[vo..vo + hd];
                    let g = dout.iter().zip(v).map(|(a, c)| a * c).sum::<f64>();
                    dp[j] = g;
                    dot += g * prow[j];
                    let dv = &mut dqkv[vo..vo + hd];
                    for (acc, d) in dv.iter_mut().zip(dout) {
                        *acc += prow[j] * d;
                    }
                }
                let qo = (b * len + i) * stride + h * hd;
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = (b * len + j) * stride + width + h * hd;
                    for t in 0..hd {
                        dqkv[qo + t] += ds * qkv[ko + t];
                        dqkv[ko + t] += ds * qkv[qo + t];
                    }
                }
            }
        }
    }
    dqkv
}

use serde::{Deserialize, Serialize};

use super::layers::{Block, LayerNorm};
use crate::ttcoding::TTCores;

/// Classification head for one physical dimension: `logits = W h + b`,
/// `W: (axis_len, width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Head {
    pub fn axis_len(&self) -> usize {
        self.b.len()
    }
}

/// Every trainable tensor of a [`super::SeqModel`]. The same type holds
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tt: TTCores,
    /// `(context_len, width)`.
    pub positional: Vec<f64>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub heads: Vec<Head>,
}

/// Named view of one tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Parameter group of a tensor name: `tt`, `positional`, `blocks` or `heads`.
pub fn group_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "tt" => "tt",
        "positional" => "positional",
        "heads" => "heads",
        _ => "blocks",
    }
}

impl Params {
    pub fn width(&self) -> usize {
        self.final_ln.gamma.len()
    }

    /// All tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        fn push<'a>(out: &mut Vec<TensorView<'a>>, name: String, shape: Vec<usize>, data: &'a [f64]) {
            out.push(TensorView { name, shape, data });
        }
        let w = self.width();
        let mut out = Vec::new();
        for (k, c) in self.tt.cores.iter().enumerate() {
            push(&mut out, format!("tt.core{k}"), c.shape().to_vec(), &c.data);
        }
        push(&mut out, "positional".into(), vec![self.positional.len() / w, w], &self.positional);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            push(&mut out, format!("{p}.ln1.gamma"), vec![w], &b.ln1.gamma);
            push(&mut out, format!("{p}.ln1.beta"), vec![w], &b.ln1.beta);
            for (n, lin) in [("qkv", &b.qkv), ("proj", &b.proj)] {
                push(&mut out, format!("{p}.{n}.w"), vec![lin.n_in, lin.n_out], &lin.w);
                push(&mut out, format!("{p}.{n}.b"), vec![lin.n_out], &lin.b);
            }
            push(&mut out, format!("{p}.ln2.gamma"), vec![w], &b.ln2.gamma);
            push(&mut out, format!("{p}.ln2.beta"), vec![w], &b.ln2.beta);
            for (n, lin) in [("fc", &b.fc), ("out", &b.out)] {
                push(&mut out, format!("{p}.{n}.w"), vec![lin.n_in, lin.n_out], &lin.w);
                push(&mut out, format!("{p}.{n}.b"), vec![lin.n_out], &lin.b);
            }
        }
        push(&mut out, "final_ln.gamma".into(), vec![w], &self.final_ln.gamma);
        push(&mut out, "final_ln.beta".into(), vec![w], &self.final_ln.beta);
        for (k, h) in self.heads.iter().enumerate() {
            push(&mut out, format!("heads.{k}.w"), vec![h.axis_len(), w], &h.w);
            push(&mut out, format!("heads.{k}.b"), vec![h.axis_len()], &h.b);
        }
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for c in self.tt.cores.iter_mut() {
            out.push(&mut c.data);
        }
        out.push(&mut self.positional);
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(&mut b.qkv.w);
            out.push(&mut b.qkv.b);
            out.push(&mut b.proj.w);
            out.push(&mut b.proj.b);
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(&mut b.fc.w);
            out.push(&mut b.fc.b);
            out.push(&mut b.out.w);
            out.push(&mut b.out.b);
        }
        out.push(&mut self.final_ln.gamma);
        out.push(&mut self.final_ln.beta);
        for h in self.heads.iter_mut() {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Total number of head parameters, `d * (width * M + M)`.
    pub fn head_param_count(&self) -> usize {
        self.heads.iter().map(|h| h.w.len() + h.b.len()).sum()
    }

    /// First group containing a non-finite value.
    pub fn first_non_finite_group(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| group_of(&t.name))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

}

use serde::{Deserialize, Serialize};

use crate::seqmodel::Params;

/// Adaptive-moment optimizer settings. Weight decay is decoupled from the
/// gradient and applies only to tensors with two or more axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the step counter used for bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let decays: Vec<bool> = params.tensors().iter().map(|t| t.shape.len() >= 2).collect();
        let g = grads.tensors();
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((p, g), m), v), decay) in p.into_iter().zip(g).zip(m).zip(v).zip(decays) {
            let wd = if decay { cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + cfg.epsilon) + wd * p[i]);
            }
        }
    }
}

/// Linear warmup from `lr / warmup` to `lr` over the first `warmup` steps,
/// constant afterwards.
pub fn learning_rate(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Rescales `grads` so that its global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::tests::{box_grid, micro_config};
    use crate::seqmodel::SeqModel;

    fn micro_params() -> Params {
        SeqModel::new(micro_config(), box_grid(2, 3)).unwrap().params
    }

    #[test]
    fn zero_gradient_only_decays_matrices() {
        let start = micro_params();
        let mut p = start.clone();
        let zero = p.zeros_like();
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&p);
        let (lr, n) = (0.05, 7);
        for _ in 0..n {
            opt.update(&mut p, &zero, lr, &cfg);
        }
        let factor = (1.0 - lr * 0.1f64).powi(n);
        for (a, b) in start.tensors().iter().zip(p.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                let want = if a.shape.len() >= 2 { x * factor } else { *x };
                assert!((want - y).abs() <= 1e-15 * want.abs().max(1.0), "{}", a.name);
            }
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let start = micro_params();
        let mut p = start.clone();
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &start.zeros_like(), 0.1, &AdamConfig::default());
        assert_eq!(p, start);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = micro_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.positional[0] = 3.0;
        g.positional[1] = -0.5;
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &g, 0.01, &AdamConfig::default());
        assert!((before.positional[0] - p.positional[0] - 0.01).abs() < 1e-9);
        assert!((p.positional[1] - before.positional[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.positional[2], before.positional[2]);
    }

    #[test]
    fn warmup_is_linear() {
        assert_eq!(learning_rate(1.0, 4, 0), 0.25);
        assert_eq!(learning_rate(1.0, 4, 3), 1.0);
        assert_eq!(learning_rate(1.0, 4, 100), 1.0);
        assert_eq!(learning_rate(0.5, 0, 0), 0.5);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = micro_params();
        let before = g.sq_norm().sqrt();
        assert_eq!(clip_grad_norm(&mut g, 1e-3), before);
        assert!((g.sq_norm().sqrt() - 1e-3).abs() < 1e-12);
        let snapshot = g.clone();
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, snapshot);
    }
}

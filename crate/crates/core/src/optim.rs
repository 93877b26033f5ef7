//! SGD with momentum and L2 weight decay, global-norm clipping and a
//! linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-6,
            grad_clip: 5.0,
        }
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_global_norm<G: ParamGroup>(grad: &mut G, max_norm: f64) -> (f64, f64) {
    let norm = grad.norm_sq().sqrt();
    if norm > max_norm && norm.is_finite() {
        grad.scale(max_norm / norm);
        (norm, grad.norm_sq().sqrt())
    } else {
        (norm, norm)
    }
}

/// `base` decayed linearly to zero over `total` steps.
pub fn linear_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - (step.min(total) as f64) / total as f64)
}

/// Momentum buffer for one parameter structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<G: ParamGroup> {
    pub config: SgdConfig,
    pub velocity: G,
    pub steps: u64,
}

impl<G: ParamGroup> Sgd<G> {
    pub fn new(config: SgdConfig, like: &G) -> Self {
        Sgd {
            config,
            velocity: like.zeros_like(),
            steps: 0,
        }
    }

    /// `v = μ v + (g + wd p); p -= lr v`. Gradients must already be clipped.
    pub fn step(&mut self, params: &mut G, grad: &G, lr: f64) {
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        let grads: Vec<&crate::Matrix> = grad.tensors().into_iter().map(|(_, t)| t).collect();
        let vels = self.velocity.tensors_mut();
        for ((p, g), v) in params.tensors_mut().into_iter().zip(grads).zip(vels) {
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                let d = gs[i] + weight_decay * ps[i];
                vs[i] = momentum * vs[i] + d;
                ps[i] -= lr * vs[i];
            }
        }
        self.steps += 1;
    }
}

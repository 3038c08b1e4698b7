use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier for quantizer scales, which live on a much
    /// smaller numeric range than the weights they quantize.
    pub quant_scale_lr: f64,
    step: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, quant_scale_lr: 1e-2, step: 0, state: HashMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update with learning rate `lr`, followed by parameter projection.
    pub fn step(&mut self, model: &mut CodecModel, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let state = &mut self.state;
        let qs = self.quant_scale_lr;
        model.visit_params(|name, p| {
            let lr = if name.ends_with(".quant.scale") { lr * qs } else { lr };
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            if m.len() != p.value.len() {
                *m = vec![0.0; p.value.len()];
                *v = vec![0.0; p.value.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
        model.project_params();
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut CodecModel, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params(|_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        model.visit_params(|_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `total` (cosine decays to zero at `total`).
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total == 0 {
                    return base;
                }
                let t = (step as f64 / total as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

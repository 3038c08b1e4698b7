//! Gradient-descent loop shared by baseline training, finetuning and QAT.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, LatentQuant, RDLossBreakdown};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam, LrSchedule};
use crate::tensor::Tensor;

/// Anything that can hand out training batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Tensor>;
}

/// Cycles through a fixed list of batches.
pub struct FixedBatches {
    batches: Vec<Tensor>,
    cursor: usize,
}

impl FixedBatches {
    pub fn new(batches: Vec<Tensor>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Argument("no batches".into()));
        }
        Ok(FixedBatches { batches, cursor: 0 })
    }
}

impl BatchSource for FixedBatches {
    fn next_batch(&mut self) -> Result<Tensor> {
        let b = self.batches[self.cursor % self.batches.len()].clone();
        self.cursor += 1;
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub lambda: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, lambda: f64, seed: u64) -> Self {
        TrainConfig { steps, lr, schedule: LrSchedule::Cosine, lambda, clip_norm: Some(1.0), seed }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<RDLossBreakdown>,
}

impl TrainReport {
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().map(|l| l.total).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Runs `cfg.steps` Adam steps on the RD loss with noise quantization.
///
/// On a non-finite loss the model is restored to its last good state and a
/// [`Error::Diverged`] is returned.
pub fn train(model: &mut CodecModel, data: &mut dyn BatchSource, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut opt = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut last_good = model.clone();
    for step in 0..cfg.steps {
        let x = data.next_batch()?;
        model.zero_grad();
        let rd = match model.loss_and_grad(&x, cfg.lambda, LatentQuant::Noise, &mut rng) {
            Ok(rd) => rd,
            Err(Error::Numerical { term, detail }) => {
                *model = last_good;
                return Err(Error::Diverged { step, detail: format!("{}: {}", term, detail) });
            }
            Err(e) => return Err(e),
        };
        let norm = clip_grad_norm(model, cfg.clip_norm.unwrap_or(f64::INFINITY));
        if !norm.is_finite() {
            *model = last_good;
            return Err(Error::Diverged { step, detail: "non-finite gradient norm".into() });
        }
        opt.step(model, cfg.schedule.lr(cfg.lr, step, cfg.steps));
        last_good.clone_from(model);
        report.losses.push(rd);
        if (step + 1) % 100 == 0 {
            log::debug!("step {} loss {:.4} bpp {:.4} mse {:.6}", step + 1, rd.total, rd.bpp, rd.distortion);
        }
    }
    model.zero_grad();
    Ok(report)
}

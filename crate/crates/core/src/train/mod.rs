//! Optimization: learning-rate schedule, AdamW, dataset splitting and the
//! teacher-forced fine-tuning loop.

mod adamw;
mod fit;
mod schedule;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adamw::{adamw_step, AdamWParams, AdamWState};
pub use fit::{
    checkpoint_file_name, encode_pair, encode_pairs, fit, fit_with_progress, pad_batch, validation_loss, EpochReport,
    FitOutcome, TrainLog,
};
pub use schedule::lr_at;
pub use split::{split_dataset, split_indices, validation_size};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_steps: 1000,
            epochs: 20,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            max_src_len: 1024,
            max_tgt_len: 1024,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.max_src_len < 2 || self.max_tgt_len == 0 {
            return Err(Error::Config("maximum lengths too small".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive, weight_decay non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip");
        }
        Ok(())
    }

    /// Optimizer steps for `n` training items.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

//! Experiment engine: optimiser and schedule, checkpoints, the training loop, evaluation,
//! prediction files and ablation runs.

mod ablate;
mod checkpoint;
mod infer;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Ablation;

pub use ablate::{ablate, ablate_dir, AblationReport, AblationRow};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use infer::{evaluate, evaluate_checkpoint, overlay, predict, predict_probabilities, quantize, test_pairs, PredictOutput};
pub use optim::{clip_grad_norm, grad_norm, AdamW, LrSchedule};
pub use train::{split_folder, train, train_dir, train_pairs, EpochLog, StepLog, TrainOptions, TrainRun, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay_rate: f64,
    pub decay_every: usize,
    /// Global L2 gradient-norm bound.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Draw one of `data.scales` per step.
    pub multiscale: bool,
    /// Evaluate on the held-out split every this many epochs (0 disables).
    pub eval_every: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 135,
            lr: 1e-4,
            weight_decay: 1e-4,
            decay_rate: 0.1,
            decay_every: 45,
            grad_clip: 0.5,
            batch_size: 20,
            input_size: 352,
            seed: 0,
            ablation: Ablation::None,
            multiscale: true,
            eval_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Short single-scale schedule for 96x96 synthetic data.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 2e-3,
            decay_every: 15,
            batch_size: 8,
            input_size: 96,
            multiscale: false,
            ..TrainConfig::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            decay_rate: self.decay_rate,
            decay_every: self.decay_every,
        }
    }

    pub fn validate(&self, multiple: usize) -> Result<()> {
        let positive = [("lr", self.lr), ("decay_rate", self.decay_rate), ("grad_clip", self.grad_clip)];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("train.epochs, batch_size and decay_every must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(multiple) {
            return Err(Error::Sizing {
                dim: "train.input_size",
                size: self.input_size,
                multiple,
            });
        }
        Ok(())
    }
}

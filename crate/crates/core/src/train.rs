//! Mini-batch training of an ensemble with a multi-step learning-rate
//! schedule and optional gradient-ledger recording.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::SwnModel;
use crate::error::{Error, Result};
use crate::harness::Split;
use crate::numerics::{Scalar, Sgd, SgdConfig};
use crate::search::GradientLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs at which the rate is multiplied by `decay_factor`; when empty,
    /// 30%, 60% and 90% of the run.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.02,
            decay_epochs: Vec::new(),
            decay_factor: 0.2,
        }
    }
}

impl LrSchedule {
    pub fn milestones(&self, epochs: usize) -> Vec<usize> {
        if self.decay_epochs.is_empty() {
            [3, 6, 9].iter().map(|k| k * epochs / 10).filter(|&e| e > 0).collect()
        } else {
            self.decay_epochs.clone()
        }
    }

    /// Rate for a 0-based `epoch` of a run lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self.milestones(epochs).iter().filter(|&&m| epoch >= m).count();
        self.initial * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

/// Optimizer state plus settings; one per training phase.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub settings: TrainSettings,
    pub sgd: Sgd<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(settings: TrainSettings) -> Self {
        Self {
            settings,
            sgd: Sgd::new(),
        }
    }

    /// One pass over `data` in seeded random order. Returns the mean batch
    /// loss. When `ledger` is given, every batch's evidence is recorded.
    pub fn run_epoch(
        &mut self,
        model: &mut SwnModel<T>,
        data: &Split<T>,
        epoch: usize,
        mut ledger: Option<&mut GradientLedger>,
        member_weights: Option<&[T]>,
    ) -> Result<f64> {
        if self.settings.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let config = SgdConfig {
            lr: self.settings.schedule.lr_at(epoch, self.settings.epochs),
            momentum: self.settings.momentum,
            weight_decay: self.settings.weight_decay,
        };
        let exempt = model.coefficient_params();
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(self.settings.batch_size) {
            let batch = data.gather(idx);
            let out = model.forward_backward(&batch.x, &batch.y, member_weights)?;
            if let Some(l) = ledger.as_deref_mut() {
                l.record_batch(&out.superweight_grads, &out.coefficient_contributions)?;
            }
            self.sgd.step(model.store_mut(), &out.grads, config, &exempt)?;
            total += out.loss.as_f64();
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }
}

//! Two-phase training: source prompt learning, then target prompt
//! generation.

mod adam;
mod checkpoint;
mod phase1;
mod phase2;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{file_sha256, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use phase1::{train_phase1, warm_queues};
pub use phase2::train_phase2;

use crate::data::{Dataset, SplitAssignment};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Model, PromptSource};
use crate::retrieval::score_sets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_decay_epochs: usize,
    pub momentum_rate: f64,
    pub queue_capacity: usize,
    pub validation_k: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::phase1()
    }
}

impl TrainConfig {
    pub fn phase1() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 2,
            lr_initial: 1e-3,
            lr_final: 1e-6,
            lr_decay_epochs: 20,
            momentum_rate: 1e-3,
            queue_capacity: 20,
            validation_k: 10,
            loss: LossConfig::default(),
            seed: 0,
        }
    }

    pub fn phase2() -> Self {
        Self { batch_size: 32, ..Self::phase1() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("early_stop_patience", self.early_stop_patience),
            ("queue_capacity", self.queue_capacity),
            ("validation_k", self.validation_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return Err(Error::Config(format!(
                "need 0 < lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            )));
        }
        crate::prompts::check_rate(self.momentum_rate)?;
        self.loss.validate()
    }

    /// Geometric interpolation from `lr_initial` to `lr_final` over
    /// `lr_decay_epochs`, then held.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epochs {
            return self.lr_final;
        }
        let ratio = self.lr_final / self.lr_initial;
        self.lr_initial * ratio.powf(epoch as f64 / self.lr_decay_epochs as f64)
    }
}

/// What phase 1 learns when no second phase follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnePhaseMode {
    /// Regular two-phase pipeline.
    Off,
    /// Phase-1 prompts only; unlabeled images get the mean prompt.
    Prompts,
    /// A linear head on zero-shot features, no prompts at all.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_mask: bool,
    /// Train the per-domain text context vectors.
    pub use_tst: bool,
    /// Fill queues from momentum prompts rather than the live ones.
    pub use_momentum: bool,
    pub crossed_tpg_pairing: bool,
    pub one_phase_mode: OnePhaseMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_mask: true, use_tst: true, use_momentum: true, crossed_tpg_pairing: false, one_phase_mode: OnePhaseMode::Off }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub triplet: f64,
    pub itc: f64,
    pub batches: usize,
    pub validation_map: f64,
    pub improved: bool,
}

/// Stops after `patience` consecutive epochs without a strictly better
/// score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records a score; returns whether it improved.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    /// Return right after this epoch finishes, as if interrupted.
    pub halt_after_epoch: Option<usize>,
    /// Receives every epoch log as it is produced.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
    /// Threads for validation embedding.
    pub workers: usize,
}

/// Training ids in the epoch's shuffled order. The order depends only on
/// the seed and the epoch, so a resumed run sees the same batches.
pub(crate) fn epoch_order(ids: &[usize], seed: u64, phase: u8, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(phase) << 56));
    rng.set_stream(epoch as u64);
    let mut order = ids.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Validation mAP@k with the given prompt source.
pub fn validation_map(dataset: &Dataset, splits: &SplitAssignment, model: &Model, source: PromptSource, k: usize, workers: usize) -> Result<f64> {
    let (queries, gallery) = splits.validation_ids();
    let scores = score_sets(dataset, &queries, &gallery, model, source, &[k], workers)?;
    Ok(scores.summaries[0].1.map)
}

pub(crate) fn check_finite(value: f64, epoch: usize, batch: usize, term: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Divergence(format!("{term} is {value} at epoch {epoch}, batch {batch}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::phase1();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(20), 1e-6);
        assert_eq!(c.lr_at(35), 1e-6);
        let factor = (1e-6f64 / 1e-3).powf(1.0 / 20.0);
        for e in 1..20 {
            assert!((c.lr_at(e) / c.lr_at(e - 1) - factor).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_scripted() {
        let mut s = EarlyStopping::new(2);
        let script = [0.1, 0.2, 0.2, 0.15, 0.3, 0.29, 0.28];
        let stops: Vec<bool> = script
            .iter()
            .map(|&x| {
                s.observe(x);
                s.should_stop()
            })
            .collect();
        assert_eq!(stops, [false, false, false, true, false, false, true]);
        assert_eq!(s.best, Some(0.3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::phase1().validate().is_ok());
        let bad = TrainConfig { lr_final: 1e-2, ..TrainConfig::phase1() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = TrainConfig { early_stop_patience: 0, ..TrainConfig::phase1() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
    }

    #[test]
    fn epoch_order_is_a_permutation_and_reproducible() {
        let ids: Vec<usize> = (0..50).collect();
        let a = epoch_order(&ids, 7, 1, 3);
        assert_eq!(a, epoch_order(&ids, 7, 1, 3));
        assert_ne!(a, epoch_order(&ids, 7, 1, 4));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, ids);
    }
}

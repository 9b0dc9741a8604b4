//! Optimisation settings, early stopping and epoch records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Supervised encoder pre-training.
    pub fn encoder() -> Self {
        TrainConfig { batch_size: 128, lr: 1e-5, max_epochs: 200, patience: 10, seed: 0 }
    }

    /// Decoder pre-training (RTLP, MLM and ELECTRA alike).
    pub fn pretrain() -> Self {
        TrainConfig { batch_size: 128, lr: 1e-3, max_epochs: 200, patience: 25, seed: 0 }
    }

    /// Captioning fine-tuning.
    pub fn finetune() -> Self {
        TrainConfig { batch_size: 128, lr: 1e-3, max_epochs: 200, patience: 10, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// What the caller should do after reporting a validation score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a validation score.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn minimize(patience: usize) -> Self {
        EarlyStopping { patience, higher_is_better: false, best: None, best_epoch: 0, stale: 0 }
    }

    pub fn maximize(patience: usize) -> Self {
        EarlyStopping { higher_is_better: true, ..Self::minimize(patience) }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => score > b,
            Some(b) => score < b,
        };
        if better {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One row of a training trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Task-specific validation metric (accuracy or BLEU-1).
    pub val_metric: f64,
}

pub(crate) fn check_loss(what: &str, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("{what} loss became {loss}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_stale_epochs() {
        let mut es = EarlyStopping::minimize(2);
        assert_eq!(es.observe(0, 1.0), Verdict::Improved);
        assert_eq!(es.observe(1, 1.0), Verdict::Continue);
        assert_eq!(es.observe(2, 0.5), Verdict::Improved);
        assert_eq!(es.observe(3, 0.7), Verdict::Continue);
        assert_eq!(es.observe(4, 0.6), Verdict::Stop);
        assert_eq!((es.best(), es.best_epoch()), (Some(0.5), 2));
        let mut up = EarlyStopping::maximize(1);
        up.observe(0, 1.0);
        assert_eq!(up.observe(1, 2.0), Verdict::Improved);
    }

    #[test]
    fn table_defaults() {
        assert_eq!((TrainConfig::encoder().batch_size, TrainConfig::encoder().lr), (128, 1e-5));
        assert_eq!((TrainConfig::pretrain().batch_size, TrainConfig::pretrain().lr), (128, 1e-3));
        assert_eq!((TrainConfig::finetune().batch_size, TrainConfig::finetune().lr), (128, 1e-3));
        assert_eq!(TrainConfig::pretrain().patience, 25);
        assert_eq!(TrainConfig::encoder().patience, 10);
    }
}

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Batch, ForecastModel, Mode};
use crate::error::{Error, Result};
use crate::timeseries::SequenceDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss (mean squared error, normalized scale) per epoch.
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    /// `epoch,loss,rmse,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mse,rmse,lr\n");
        for (e, (l, lr)) in self.losses.iter().zip(&self.learning_rates).enumerate() {
            s.push_str(&format!("{e},{l},{},{lr}\n", l.sqrt()));
        }
        s
    }
}

/// Tracks the best loss and how many epochs have passed without a strict
/// improvement on it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch loss; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Trains with mini-batch gradient descent on the mean squared error.
/// Windows are reshuffled every epoch from a generator seeded by the config
/// seed; the parameters of the best epoch are returned.
pub fn train(model: ForecastModel, dataset: &SequenceDataset) -> Result<(ForecastModel, TrainHistory)> {
    train_cancellable(model, dataset, &AtomicBool::new(false))
}

/// As [`train`], checking `cancel` before every epoch.
pub fn train_cancellable(
    model: ForecastModel,
    dataset: &SequenceDataset,
    cancel: &AtomicBool,
) -> Result<(ForecastModel, TrainHistory)> {
    if dataset.is_empty() {
        return Err(Error::invalid(
            dataset.diagnostic.clone().unwrap_or_else(|| "empty training dataset".into()),
        ));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut model = model;
    model.stats = Some(dataset.stats);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut losses = Vec::new();
    let mut lrs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        if cancel.load(Ordering::SeqCst) {
            return Err(Error::Cancelled);
        }
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_windows(chunk.iter().map(|&i| &dataset.windows[i]));
            let (_, cache) = model.forward(&batch, Mode::Train)?;
            let loss = ForecastModel::loss(&cache, &batch.targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = model.backward(&cache, &batch.targets)?;
            model.update_running_stats(&cache);
            model.apply_gradients(&grads, lr);
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        losses.push(epoch_loss);
        lrs.push(lr);
        if stopper.observe(epoch, epoch_loss) {
            best_model = model.clone();
        }
        log::debug!("epoch {epoch}: mse {epoch_loss:.6e} lr {lr:.3e}");
        if stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_loss) = stopper.best();
    best_model.bump_version();
    Ok((
        best_model,
        TrainHistory {
            losses,
            learning_rates: lrs,
            stop_reason,
            best_epoch,
            best_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_stops_patience_epochs_after_best() {
        let mut s = EarlyStopping::new(20);
        let mut stopped_at = None;
        for epoch in 0..1000 {
            // improving until epoch 10, flat afterwards
            let loss = if epoch <= 10 { 1.0 / (epoch as f64 + 1.0) } else { 1.0 / 11.0 };
            s.observe(epoch, loss);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(30));
        assert_eq!(s.best().0, 10);
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(0, 1.0));
        assert!(!s.observe(1, 1.0));
        assert!(s.should_stop());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{N_FEATURES, WEEK};

/// Architecture and training hyperparameters of the forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub lstm_sizes: Vec<usize>,
    /// Hidden fully-connected layers (ReLU); the linear output layer is implicit.
    pub fc_sizes: Vec<usize>,
    pub output_dim: usize,
    /// Batch normalization on hidden fully-connected pre-activations.
    pub batch_norm: bool,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
    /// Divide `init_std` by `sqrt(fan_in)` per weight matrix.
    pub init_fan_in_scaled: bool,
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: N_FEATURES,
            seq_len: WEEK,
            lstm_sizes: vec![256],
            fc_sizes: vec![128],
            output_dim: 1,
            batch_norm: true,
            init_std: 1.0,
            init_fan_in_scaled: false,
            lr_start: 1e-3,
            lr_end: 1e-5,
            max_epochs: 1000,
            patience: 20,
            batch_size: 80,
            seed: 0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Smaller network used for desk-scale experiments and tests.
    pub fn reduced() -> Self {
        ModelConfig {
            lstm_sizes: vec![32],
            fc_sizes: vec![16],
            max_epochs: 200,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes_ok = self.input_dim >= 1
            && self.seq_len >= 1
            && self.output_dim >= 1
            && !self.lstm_sizes.is_empty()
            && self.lstm_sizes.iter().all(|&s| s >= 1)
            && self.fc_sizes.iter().all(|&s| s >= 1)
            && self.batch_size >= 1;
        if !sizes_ok {
            return Err(Error::invalid(format!("invalid layer sizes in {self:?}")));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::invalid(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} / {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "need 0 < patience ({}) < max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::invalid("init_std must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate at `epoch`, decaying exponentially from `lr_start` at
    /// epoch 0 to `lr_end` at epoch `max_epochs - 1`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let last = self.max_epochs.saturating_sub(1);
        if epoch == 0 || last == 0 {
            return self.lr_start;
        }
        if epoch >= last {
            return self.lr_end;
        }
        let frac = epoch as f64 / last as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut input = self.input_dim;
        for &h in &self.lstm_sizes {
            n += 4 * h * input + 4 * h * h + 4 * h;
            input = h;
        }
        for &h in &self.fc_sizes {
            n += h * input;
            // batch norm replaces the bias with its shift
            n += if self.batch_norm { 2 * h } else { h };
            input = h;
        }
        n + self.output_dim * input + self.output_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::reduced().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lstm_sizes = vec![]));
        assert!(bad(|c| c.fc_sizes = vec![0]));
        assert!(bad(|c| c.lr_end = 0.0));
        assert!(bad(|c| c.lr_start = 1e-6));
        assert!(bad(|c| c.patience = 1000));
        assert!(bad(|c| c.batch_size = 0));
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let c = ModelConfig::default();
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(999), 1e-5);
        let mut prev = f64::INFINITY;
        for e in 0..1000 {
            let lr = c.learning_rate(e);
            assert!(lr < prev);
            prev = lr;
        }
        // geometric midpoint
        let mid = ModelConfig { max_epochs: 3, patience: 1, ..c };
        assert!((mid.learning_rate(1) - 1e-4).abs() < 1e-18);
    }
}

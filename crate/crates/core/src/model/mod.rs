//! Unidirectional LSTM forecaster trained with backpropagation through time.
//!
//! The network maps a week of 7-feature inputs to a week of daily
//! consumption values: one or more LSTM layers, then fully-connected ReLU
//! layers applied per time step, then a linear output. Training minimizes
//! the mean squared error (RMSE is reported) with plain mini-batch gradient
//! descent, an exponentially decaying learning rate and early stopping on
//! the training loss.

pub mod checkpoint;
mod config;
mod network;
mod train;

pub use config::ModelConfig;
pub use network::{Batch, BatchNorm, DenseLayer, ForecastModel, ForwardCache, Gradients, LstmLayer, Mode, Tensor};
pub use train::{train, train_cancellable, EarlyStopping, StopReason, TrainHistory};

use crate::error::{Error, Result};
use crate::timeseries::{window_input, SequenceDataset, WEEK};

/// Root mean squared error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("rmse over {} vs {} values", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::invalid("rmse of zero values"));
    }
    let sq: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

/// Which scale evaluation errors are reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ErrorScale {
    /// Normalized with the dataset's statistics.
    #[default]
    Normalized,
    /// Denormalized back to the original consumption unit.
    Raw,
}

/// RMSE of inference-mode predictions over every target in `dataset`.
pub fn evaluate(model: &ForecastModel, dataset: &SequenceDataset, scale: ErrorScale) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut preds = Vec::with_capacity(dataset.len() * WEEK);
    let mut targets = Vec::with_capacity(dataset.len() * WEEK);
    for chunk in dataset.windows.chunks(256) {
        let batch = Batch::from_windows(chunk);
        preds.extend(model.predict(&batch)?);
        targets.extend(batch.targets);
    }
    if scale == ErrorScale::Raw {
        let c = dataset.stats.consumption();
        preds.iter_mut().for_each(|v| *v = c.denormalize(*v));
        targets.iter_mut().for_each(|v| *v = c.denormalize(*v));
    }
    rmse(&targets, &preds)
}

/// Forecasts the next 7 daily consumption values from last week's
/// consumption and the current and next week's weather (air temperature,
/// solar irradiance, wind speed per day), all on the original scale.
pub fn predict_week(
    model: &ForecastModel,
    last_week: &[f64],
    next_week_weather: &[[f64; 3]],
    current_week_weather: &[[f64; 3]],
) -> Result<[f64; WEEK]> {
    let stats = model
        .stats
        .ok_or_else(|| Error::invalid("model carries no normalization statistics"))?;
    if model.config.seq_len != WEEK || model.config.input_dim != crate::timeseries::N_FEATURES {
        return Err(Error::Shape("model is not configured for weekly 7-feature input".into()));
    }
    let week = |name: &str, len: usize| -> Result<()> {
        if len != WEEK {
            return Err(Error::invalid(format!("{name} has {len} days, expected {WEEK}")));
        }
        Ok(())
    };
    week("last week consumption", last_week.len())?;
    week("next week weather", next_week_weather.len())?;
    week("current week weather", current_week_weather.len())?;
    for (name, w) in [("next", next_week_weather), ("current", current_week_weather)] {
        if let Some(day) = w.iter().position(|d| d.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("{name} week weather missing a channel on day {day}")));
        }
    }
    if last_week.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("last week consumption has missing values"));
    }
    let mut cons = [0.0; WEEK];
    let mut cur = [[0.0; 3]; WEEK];
    let mut next = [[0.0; 3]; WEEK];
    cons.copy_from_slice(last_week);
    cur.copy_from_slice(current_week_weather);
    next.copy_from_slice(next_week_weather);
    let window = crate::timeseries::Window {
        input: window_input(&stats, &cons, &cur, &next),
        target: [0.0; WEEK],
    };
    let preds = model.predict(&Batch::from_windows([&window]))?;
    let c = stats.consumption();
    let mut out = [0.0; WEEK];
    for (o, p) in out.iter_mut().zip(preds) {
        *o = c.denormalize(p);
    }
    Ok(out)
}

/// Per-tensor worst relative error between backpropagated gradients and
/// central finite differences of the training-mode loss.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Relative error `|a - b| / max(|a|, |b|)`, with the denominator floored
/// at `1e-8` so gradients that are both numerically zero compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares every gradient entry against central differences with step
/// `eps`. Returns the worst relative error over all entries.
pub fn gradient_check(model: &ForecastModel, batch: &Batch, eps: f64) -> Result<f64> {
    Ok(gradient_check_report(model, batch, eps)?.worst())
}

pub fn gradient_check_report(model: &ForecastModel, batch: &Batch, eps: f64) -> Result<GradientCheck> {
    let (_, cache) = model.forward(batch, Mode::Train)?;
    let grads = model.backward(&cache, &batch.targets)?;
    let loss_at = |m: &ForecastModel| -> Result<f64> {
        let (_, c) = m.forward(batch, Mode::Train)?;
        ForecastModel::loss(&c, &batch.targets)
    };
    let names: Vec<String> = model.params().iter().map(|t| t.name.clone()).collect();
    let mut probe = model.clone();
    let mut per_tensor = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        let len = model.params()[ti].len();
        for k in 0..len {
            let orig = model.params()[ti].data[k];
            probe.params_mut()[ti].data[k] = orig + eps;
            let up = loss_at(&probe)?;
            probe.params_mut()[ti].data[k] = orig - eps;
            let down = loss_at(&probe)?;
            probe.params_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grads.tensors[ti][k], numeric));
        }
        per_tensor.push((name, worst));
    }
    Ok(GradientCheck { per_tensor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{MinMax, NormalizationStats, Window};

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 12.5f64.sqrt());
        assert!((rmse(&[0.0, 3.0], &[4.0, 0.0]).unwrap() - 3.53553).abs() < 1e-5);
        let c = -2.5;
        let a = rmse(&[0.0 * c, 3.0 * c], &[4.0 * c, 0.0 * c]).unwrap();
        assert!((a - 2.5 * 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    fn stats() -> NormalizationStats {
        NormalizationStats {
            channels: [
                MinMax { min: 5.0, max: 25.0 },
                MinMax { min: -5.0, max: 30.0 },
                MinMax { min: 0.0, max: 300.0 },
                MinMax { min: 0.0, max: 15.0 },
            ],
            clip: false,
        }
    }

    #[test]
    fn zero_model_forecasts_consumption_minimum() {
        let mut m = ForecastModel::init(&ModelConfig { init_std: 0.0, batch_norm: false, ..ModelConfig::reduced() }).unwrap();
        m.stats = Some(stats());
        // inputs at each channel minimum normalize to 0
        let out = predict_week(&m, &[5.0; 7], &[[-5.0, 0.0, 0.0]; 7], &[[-5.0, 0.0, 0.0]; 7]).unwrap();
        assert_eq!(out, [5.0; 7]);
        assert_eq!(out.len(), 7);
    }

    #[test]
    fn predict_week_matches_training_path() {
        let mut m = ForecastModel::init(&ModelConfig { batch_norm: false, init_std: 0.3, ..ModelConfig::reduced() }).unwrap();
        let st = stats();
        m.stats = Some(st);
        let cons = [6.0, 9.0, 12.0, 7.5, 20.0, 11.0, 8.0];
        let cur: Vec<[f64; 3]> = (0..7).map(|d| [d as f64, 10.0 * d as f64, 1.0]).collect();
        let next: Vec<[f64; 3]> = (0..7).map(|d| [2.0 * d as f64, 5.0, 3.0]).collect();
        let mut c = [0.0; 7];
        c.copy_from_slice(&cons);
        let mut cw = [[0.0; 3]; 7];
        cw.copy_from_slice(&cur);
        let mut nw = [[0.0; 3]; 7];
        nw.copy_from_slice(&next);
        let w = Window { input: window_input(&st, &c, &cw, &nw), target: [0.0; 7] };
        let (train_preds, _) = m.forward(&Batch::from_windows([&w]), Mode::Train).unwrap();
        let out = predict_week(&m, &cons, &next, &cur).unwrap();
        for (o, p) in out.iter().zip(train_preds) {
            assert_eq!(*o, st.consumption().denormalize(p));
        }
    }

    #[test]
    fn predict_week_rejects_missing_weather() {
        let mut m = ForecastModel::init(&ModelConfig::reduced()).unwrap();
        m.stats = Some(stats());
        let mut cur = [[1.0, 1.0, 1.0]; 7];
        cur[3][2] = f64::NAN;
        assert!(predict_week(&m, &[5.0; 7], &[[1.0; 3]; 7], &cur).is_err());
        assert!(predict_week(&m, &[5.0; 7], &[[1.0; 3]; 6], &[[1.0; 3]; 7]).is_err());
        m.stats = None;
        assert!(predict_week(&m, &[5.0; 7], &[[1.0; 3]; 7], &[[1.0; 3]; 7]).is_err());
    }
}

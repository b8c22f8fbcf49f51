//! Versioned JSON checkpoint: config, every tensor with its declared shape
//! (row-major), batch-norm running statistics, normalization statistics and
//! seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::network::{ForecastModel, Tensor};
use crate::error::{Error, Result};
use crate::timeseries::NormalizationStats;

pub const CHECKPOINT_FORMAT: &str = "crossgrid-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub tensors: Vec<Tensor>,
    pub running_stats: Vec<Tensor>,
    pub stats: Option<NormalizationStats>,
}

impl Checkpoint {
    pub fn from_model(model: &ForecastModel) -> Self {
        let mut running = Vec::new();
        for (l, d) in model.hidden.iter().enumerate() {
            if let Some(bn) = &d.bn {
                running.push(Tensor {
                    name: format!("fc{l}.bn.running_mean"),
                    shape: vec![bn.running_mean.len()],
                    data: bn.running_mean.clone(),
                });
                running.push(Tensor {
                    name: format!("fc{l}.bn.running_var"),
                    shape: vec![bn.running_var.len()],
                    data: bn.running_var.clone(),
                });
            }
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            seed: model.config.seed,
            config: model.config.clone(),
            parameter_count: model.parameter_count(),
            tensors: model.params().into_iter().cloned().collect(),
            running_stats: running,
            stats: model.stats,
        }
    }

    pub fn into_model(self) -> Result<ForecastModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                self.format
            )));
        }
        let mut model = ForecastModel::init(&ModelConfig {
            init_std: 0.0,
            ..self.config.clone()
        })?;
        model.config = self.config;
        {
            let params = model.params_mut();
            if params.len() != self.tensors.len() {
                return Err(Error::Shape(format!(
                    "checkpoint has {} tensors, model expects {}",
                    self.tensors.len(),
                    params.len()
                )));
            }
            for (p, t) in params.into_iter().zip(self.tensors) {
                if p.name != t.name || p.shape != t.shape || t.data.len() != p.data.len() {
                    return Err(Error::Shape(format!(
                        "tensor `{}` {:?} does not match `{}` {:?}",
                        t.name, t.shape, p.name, p.shape
                    )));
                }
                p.data = t.data;
            }
        }
        let mut running = self.running_stats.into_iter();
        for d in &mut model.hidden {
            if let Some(bn) = &mut d.bn {
                let (m, v) = (running.next(), running.next());
                match (m, v) {
                    (Some(m), Some(v)) if m.data.len() == bn.running_mean.len() && v.data.len() == bn.running_var.len() => {
                        bn.running_mean = m.data;
                        bn.running_var = v.data;
                    }
                    _ => return Err(Error::Shape("missing batch-norm running statistics".into())),
                }
            }
        }
        model.stats = self.stats;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

pub fn save(model: &ForecastModel, path: &Path) -> Result<String> {
    let bytes = Checkpoint::from_model(model).to_bytes()?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> Result<ForecastModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    ck.into_model()
}

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let mut m = ForecastModel::init(&ModelConfig {
            lstm_sizes: vec![5],
            fc_sizes: vec![4, 3],
            max_epochs: 10,
            patience: 2,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        m.hidden[1].bn.as_mut().unwrap().running_mean[2] = 0.123456789;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let d1 = save(&m, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(Checkpoint::from_model(&back), Checkpoint::from_model(&m));
        let d2 = save(&back, &dir.path().join("n.json")).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn rejects_foreign_format() {
        let m = ForecastModel::init(&ModelConfig::reduced()).unwrap();
        let mut ck = Checkpoint::from_model(&m);
        ck.format = "other/9".into();
        assert!(ck.into_model().is_err());
    }
}

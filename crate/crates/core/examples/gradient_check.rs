//! Compares backpropagated gradients of a tiny forecaster with central
//! finite differences, per parameter tensor, with and without batch norm.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossgrid::model::{gradient_check_report, Batch, ForecastModel, ModelConfig};
use crossgrid::timeseries::{N_FEATURES, WEEK};

fn main() -> crossgrid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = Batch {
        size: 2,
        seq_len: WEEK,
        features: N_FEATURES,
        inputs: (0..2 * WEEK * N_FEATURES).map(|_| rng.random()).collect(),
        targets: (0..2 * WEEK).map(|_| rng.random()).collect(),
    };
    for batch_norm in [false, true] {
        let model = ForecastModel::init(&ModelConfig {
            lstm_sizes: vec![4],
            fc_sizes: vec![3],
            batch_norm,
            init_std: 0.5,
            ..ModelConfig::default()
        })?;
        let report = gradient_check_report(&model, &batch, 1e-5)?;
        println!("batch norm {}:", if batch_norm { "on" } else { "off" });
        for (name, err) in &report.per_tensor {
            println!("  {name:<16} {err:.2e}");
        }
        println!("  worst relative error {:.2e}", report.worst());
    }
    Ok(())
}

//! Trains the LSTM forecaster on two similar buildings, tests it on a third
//! from the same group, forecasts one week and round-trips the checkpoint.
//!
//! cargo run --release --example train_forecaster -- [seed]

use crossgrid::model::{checkpoint, evaluate, predict_week, train, ErrorScale, ForecastModel, ModelConfig};
use crossgrid::selection::assemble_ids;
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};
use crossgrid::timeseries::{build_windows, WEEK};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let fleet = SyntheticFleet::generate(&FleetConfig { seed, ..FleetConfig::default() })?;
    let cfg = ModelConfig {
        seed,
        lr_start: 0.05,
        lr_end: 0.005,
        init_fan_in_scaled: true,
        ..ModelConfig::reduced()
    };
    println!("{} parameters", cfg.parameter_count());

    let train_range = Some(fleet.train_range(140));
    let sources = ["1".to_string(), "2".to_string()];
    let assembled = assemble_ids(&sources, &fleet.buildings, train_range)?;
    let (model, hist) = train(ForecastModel::init(&cfg)?, &assembled.dataset)?;
    println!(
        "{:?} after {} epochs; best epoch {} (mse {:.5})",
        hist.stop_reason,
        hist.epochs(),
        hist.best_epoch,
        hist.best_loss
    );

    let target = &fleet.buildings[2];
    let stats = model.stats.expect("trained models carry statistics");
    let test = build_windows(target, &stats, Some(fleet.test_range(140)));
    println!(
        "building {} test rmse: {:.4} normalized, {:.3} kWh",
        target.building_id,
        evaluate(&model, &test, ErrorScale::Normalized)?,
        evaluate(&model, &test, ErrorScale::Raw)?
    );

    // forecast the final week from the week before it
    let n = target.energy.len();
    let last_week: Vec<f64> = target.energy.values[n - 2 * WEEK..n - WEEK]
        .iter()
        .map(|v| v.expect("synthetic data is complete"))
        .collect();
    let weather = |from: usize| -> Vec<[f64; 3]> {
        (from..from + WEEK)
            .map(|d| std::array::from_fn(|c| target.weather[c].values[d].expect("complete")))
            .collect()
    };
    let forecast = predict_week(&model, &last_week, &weather(n - WEEK), &weather(n - 2 * WEEK))?;
    for (d, f) in forecast.iter().enumerate() {
        let actual = target.energy.values[n - WEEK + d].unwrap_or(f64::NAN);
        println!("  {}  forecast {f:6.2} kWh  actual {actual:6.2} kWh", target.energy.date_at(n - WEEK + d));
    }

    let path = std::env::temp_dir().join("crossgrid-checkpoint.json");
    let digest = checkpoint::save(&model, &path)?;
    let back = checkpoint::load(&path)?;
    println!("checkpoint sha256 {digest}, reload identical: {}", back == model);
    Ok(())
}

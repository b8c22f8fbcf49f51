//! Cross-building transfer study on a seeded synthetic fleet: train one
//! reduced model per building, test every model on every building, cluster
//! the error matrix and compare it with the description clustering.
//!
//! cargo run --release --example transfer_matrix -- [seed] [lr_start] [lr_end]

use std::time::Instant;

use crossgrid::evaluation::{
    clustering_agreement, compare_source_groups, description_clusters, error_matrix_clusters, train_fleet,
    transfer_matrix, EvalConfig,
};
use crossgrid::metadata::Encoding;
use crossgrid::model::{ErrorScale, ModelConfig};
use crossgrid::similarity::LinkageMethod;
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};

fn main() -> crossgrid::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let seed = arg(0, 0.0) as u64;
    let fleet = SyntheticFleet::generate(&FleetConfig { seed, ..FleetConfig::default() })?;
    let cfg = EvalConfig {
        model: ModelConfig {
            seed,
            lr_start: arg(1, 0.05),
            lr_end: arg(2, 0.005),
            init_std: 1.0,
            init_fan_in_scaled: true,
            ..ModelConfig::reduced()
        },
        ..EvalConfig::default()
    };
    let t0 = Instant::now();
    let models = train_fleet(&fleet.buildings, Some(fleet.train_range(140)), &cfg)?;
    println!("trained {} models in {:.1?}", models.models.len(), t0.elapsed());
    for (id, h) in models.ids.iter().zip(&models.histories) {
        println!("  building {id}: {} epochs, best training rmse {:.4}", h.epochs(), h.best_loss.sqrt());
    }
    let test = Some(fleet.test_range(140));
    let m = transfer_matrix(&models, &fleet.buildings, test, ErrorScale::Normalized, false)?;
    print!("{}", m.to_csv(&[format!("seed: {seed}")]));

    let (_, desc) = description_clusters(&fleet.descriptions, Encoding::OneHot, LinkageMethod::Average, 0.7)?;
    let (_, err) = error_matrix_clusters(&m, LinkageMethod::Average, 0.7)?;
    println!("description clusters: {:?}", desc.groups());
    println!("error clusters:       {:?}", err.groups());
    println!("agreement (Rand index): {:.3}", clustering_agreement(&desc, &err)?);

    let raw = transfer_matrix(&models, &fleet.buildings, test, ErrorScale::Raw, false)?;
    for c in compare_source_groups(&raw, &desc)? {
        println!(
            "target {}: same-group {:.3} kWh, cross-group {:.3} kWh",
            c.target, c.same_group, c.cross_group
        );
    }
    Ok(())
}

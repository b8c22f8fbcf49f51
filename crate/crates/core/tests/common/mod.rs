#![allow(dead_code)]

use std::path::Path;

use crossgrid::model::ModelConfig;
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};
use crossgrid::workflow::{StoreCatalog, WorkflowConfig};

/// A description matching the first synthetic group.
pub const GROUP_A_TARGET: &str = "occupants=2, house_type=detached, construction_year=1975-1980, bedrooms=3, appliances=26";

/// Reduced network with a learning-rate schedule that converges within a
/// few hundred plain gradient-descent steps on the synthetic fleet.
pub fn desk_model(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        lr_start: 0.05,
        lr_end: 0.005,
        init_fan_in_scaled: true,
        ..ModelConfig::reduced()
    }
}

pub fn quick_model(seed: u64) -> ModelConfig {
    ModelConfig {
        max_epochs: 30,
        patience: 10,
        ..desk_model(seed)
    }
}

pub fn fleet(groups: usize, per_group: usize, days: usize) -> SyntheticFleet {
    SyntheticFleet::generate(&FleetConfig {
        groups,
        per_group,
        days,
        ..FleetConfig::default()
    })
    .expect("synthetic fleet")
}

pub fn store(dir: &Path, fleet: &SyntheticFleet) -> StoreCatalog {
    StoreCatalog::from_fleet(dir, fleet).expect("store from fleet")
}

pub fn workflow_config(model: ModelConfig) -> WorkflowConfig {
    WorkflowConfig {
        model,
        ..WorkflowConfig::default()
    }
}

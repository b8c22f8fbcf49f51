//! The event-driven request workflow: submit a target description, let the
//! selection, data and learning services exchange messages, and read back a
//! 7-day forecast. One building-data delivery is made to fail on purpose to
//! show redelivery; the message log is then replayed.
//!
//! cargo run --release --example workflow_pipeline

use std::time::Duration;

use crossgrid::model::ModelConfig;
use crossgrid::selection::SelectionRule;
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};
use crossgrid::workflow::{
    replay, states_from_log, FaultPlan, LogEvent, Service, StoreCatalog, Workflow, WorkflowConfig, FORECAST_HORIZON,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let dir = tempfile::tempdir()?;
    let fleet = SyntheticFleet::generate(&FleetConfig { days: 120, ..FleetConfig::default() })?;
    StoreCatalog::from_fleet(dir.path(), &fleet)?;

    let cfg = WorkflowConfig {
        model: ModelConfig {
            lr_start: 0.05,
            lr_end: 0.005,
            init_fan_in_scaled: true,
            max_epochs: 60,
            ..ModelConfig::reduced()
        },
        faults: FaultPlan::default().fail(Service::BuildingData, 1),
        ..WorkflowConfig::default()
    };
    let wf = Workflow::start(StoreCatalog::open(dir.path())?, cfg.clone())?;
    let id = wf.submit(
        "occupants=4, house_type=mid-terrace, construction_year=post-2002, bedrooms=2, appliances=38",
        FORECAST_HORIZON,
        SelectionRule::TopK(2),
    )?;
    let rec = wf.wait(&id, Duration::from_secs(300))?;
    println!("{id}: {:?}", rec.state);
    for (state, ms) in &rec.transitions {
        println!("  {state:?} at {ms}");
    }
    if let Some(f) = &rec.forecast {
        println!("sources {:?}, model {}", f.sources, f.model_key);
        for (d, v) in f.values.iter().enumerate() {
            println!("  {} {v:.2} {}", f.start + chrono::Days::new(d as u64), f.unit);
        }
    }
    wf.shutdown();

    let log = wf.log();
    for r in &log {
        let mark = match r.event {
            LogEvent::Publish => "",
            LogEvent::Redeliver => "  (redelivered)",
            LogEvent::Duplicate => "  (duplicate)",
            LogEvent::Fault => "  (injected fault)",
        };
        println!("{:>3} {:<17} attempt {}{mark}", r.seq, r.envelope.kind.to_string(), r.envelope.attempt);
    }
    println!("state folded from log: {:?}", states_from_log(&log));
    let again = replay(&log, StoreCatalog::open(dir.path())?, cfg, Duration::from_secs(300))?;
    println!("replayed state: {:?}", again[&id].state);
    Ok(())
}

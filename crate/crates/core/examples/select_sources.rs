//! Ranks source buildings for an unseen target description and assembles
//! their windows into one training set.
//!
//! cargo run --example select_sources -- "occupants=4, house_type=mid-terrace, bedrooms=2" [k=3|threshold=0.5]

use crossgrid::metadata::{BuildingDescription, Encoding};
use crossgrid::selection::{assemble_training_set, select_sources, SelectionRule};
use crossgrid::synthetic::{FleetConfig, SyntheticFleet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let doc = args.first().map(String::as_str).unwrap_or(
        "occupants=2, house_type=detached, construction_year=1975-1980, bedrooms=3, appliances=26",
    );
    let rule: SelectionRule = match args.get(1) {
        Some(r) => r.parse()?,
        None => SelectionRule::default(),
    };
    let fleet = SyntheticFleet::generate(&FleetConfig::default())?;
    // keys the schema does not know are kept aside rather than rejected
    let target = BuildingDescription::parse_kv("target", doc, &fleet.descriptions.schema, false)?;
    if !target.extras.is_empty() {
        println!("ignoring attributes: {:?}", target.extras);
    }

    let sel = select_sources(&target, &fleet.descriptions, rule, Encoding::OneHot)?;
    print!("{}", sel.to_csv());

    let assembled = assemble_training_set(&sel, &fleet.buildings, Some(fleet.train_range(140)))?;
    for w in assembled.warnings() {
        println!("warning: {w}");
    }
    let ds = &assembled.dataset;
    println!("{} windows from {:?}", ds.len(), ds.source_ids());
    println!("consumption range used for scaling: {:?}", ds.stats.consumption());
    Ok(())
}

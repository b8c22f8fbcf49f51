//! Raw high-frequency readings to daily series to model-ready windows.
//! Writes a synthetic fleet as hourly raw files, loads one building back,
//! aggregates it per day and builds 7-feature windows.
//!
//! cargo run --example ingest_raw

use crossgrid::synthetic::{FleetConfig, SyntheticFleet};
use crossgrid::timeseries::{
    build_windows, load_raw, load_raw_channels, resample_daily_mean, resample_daily_sum, BuildingSeries, ColumnMap,
    Coverage, DailySeries, NormalizationStats, FEATURE_NAMES,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let fleet = SyntheticFleet::generate(&FleetConfig { days: 60, ..FleetConfig::default() })?;
    fleet.write_raw(dir.path(), 3600)?;

    let (raw, report) = load_raw(&dir.path().join("energy/1.csv"), "1", "W", &ColumnMap::load())?;
    println!("energy: {} rows read, {} points", report.rows_read, raw.len());
    let mut energy = resample_daily_sum(&raw, &Coverage::default())?;
    // hourly readings in Wh sum to daily Wh; the fleet works in kWh
    for v in energy.values.iter_mut().flatten() {
        *v /= 1000.0;
    }

    let (channels, _) = load_raw_channels(&dir.path().join("weather/ws0.csv"), "ws0", "", &ColumnMap::weather())?;
    let weather: Vec<DailySeries> = channels
        .iter()
        .map(|c| resample_daily_mean(c, &Coverage::default()))
        .collect::<crossgrid::Result<_>>()?;
    let weather: [DailySeries; 3] = weather.try_into().expect("three weather channels");

    let b = BuildingSeries {
        building_id: "1".into(),
        energy,
        weather,
    };
    let stats = NormalizationStats::fit(&[&b], None)?;
    let ds = build_windows(&b, &stats, None);
    println!("{} days -> {} windows (days - 13)", b.energy.len(), ds.len());
    for (f, name) in FEATURE_NAMES.iter().enumerate().take(4) {
        let mm = stats.feature(f);
        println!("  {name:<18} min {:8.2} max {:8.2}", mm.min, mm.max);
    }
    let first = &ds.windows[0];
    println!("first window, day 0 inputs (normalized): {:.3?}", first.input[0]);
    Ok(())
}

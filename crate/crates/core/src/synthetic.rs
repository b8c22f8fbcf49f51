//! Seeded synthetic fleets: buildings in description groups, each group
//! sharing consumption dynamics (base load and weather sensitivity), all
//! driven by one weather station.

use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metadata::{BuildingDescription, DescriptionTable, Schema, Value};
use crate::timeseries::{BuildingSeries, DailySeries, DateRange};

pub const SCHEMA_TEXT: &str = "\
@id = building_id
occupants = numeric min=1
house_type = categorical
construction_year = ordered pre-1850|1850-1899|1900-1929|1930-1949|1950-1974|1975-1980|1981-1990|1991-1995|1996-2001|post-2002
bedrooms = numeric min=1
appliances = numeric min=0
";

pub fn schema() -> Schema {
    Schema::parse(SCHEMA_TEXT).expect("built-in schema parses")
}

/// Description and consumption dynamics shared by one group.
#[derive(Debug, Clone)]
pub struct GroupProfile {
    pub occupants: f64,
    pub house_type: &'static str,
    pub construction_year: &'static str,
    pub bedrooms: f64,
    pub appliances: f64,
    /// Daily base load, kWh.
    pub base_load: f64,
    /// kWh per degree below `heating_setpoint`.
    pub heating_slope: f64,
    pub heating_setpoint: f64,
    /// kWh per W/m² of solar irradiance (negative for on-site generation).
    pub solar_slope: f64,
    /// Multiplier on weekend days.
    pub weekend_factor: f64,
}

impl GroupProfile {
    pub fn presets() -> Vec<GroupProfile> {
        vec![
            GroupProfile {
                occupants: 2.0,
                house_type: "detached",
                construction_year: "1975-1980",
                bedrooms: 3.0,
                appliances: 25.0,
                base_load: 8.0,
                heating_slope: 1.1,
                heating_setpoint: 16.0,
                solar_slope: 0.0,
                weekend_factor: 1.15,
            },
            GroupProfile {
                occupants: 4.0,
                house_type: "mid-terrace",
                construction_year: "post-2002",
                bedrooms: 2.0,
                appliances: 40.0,
                base_load: 18.0,
                heating_slope: 0.05,
                heating_setpoint: 12.0,
                solar_slope: -0.03,
                weekend_factor: 0.8,
            },
            GroupProfile {
                occupants: 1.0,
                house_type: "semi-detached",
                construction_year: "1900-1929",
                bedrooms: 4.0,
                appliances: 15.0,
                base_load: 4.0,
                heating_slope: 0.5,
                heating_setpoint: 18.0,
                solar_slope: 0.01,
                weekend_factor: 1.0,
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct FleetConfig {
    pub seed: u64,
    pub groups: usize,
    pub per_group: usize,
    pub days: usize,
    pub start: NaiveDate,
    /// Relative standard deviation of daily consumption noise.
    pub noise: f64,
    /// Relative spread of per-building dynamics around the group profile.
    pub jitter: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            seed: 0,
            groups: 2,
            per_group: 3,
            days: 180,
            start: NaiveDate::from_ymd_opt(2014, 4, 1).expect("valid date"),
            noise: 0.04,
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFleet {
    pub descriptions: DescriptionTable,
    pub buildings: Vec<BuildingSeries>,
    /// Generating group per building, aligned with `buildings`.
    pub groups: Vec<usize>,
    pub station_id: String,
    pub weather: [DailySeries; 3],
    pub start: NaiveDate,
    pub days: usize,
}

impl SyntheticFleet {
    pub fn generate(cfg: &FleetConfig) -> Result<Self> {
        let presets = GroupProfile::presets();
        if cfg.groups == 0 || cfg.groups > presets.len() || cfg.per_group == 0 {
            return Err(Error::invalid(format!(
                "synthetic fleets support 1..={} groups with at least one building each",
                presets.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let station_id = "ws0".to_string();
        let weather = generate_weather(&station_id, cfg.start, cfg.days, &mut rng);
        let schema = schema();
        let mut rows = Vec::new();
        let mut buildings = Vec::new();
        let mut groups = Vec::new();
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for (g, profile) in presets.iter().take(cfg.groups).enumerate() {
            for k in 0..cfg.per_group {
                let id = (g * cfg.per_group + k + 1).to_string();
                let appliances = profile.appliances + (k as f64) - (cfg.per_group as f64 - 1.0) / 2.0;
                rows.push(BuildingDescription {
                    building_id: id.clone(),
                    values: vec![
                        Value::Number(profile.occupants),
                        Value::Label(profile.house_type.into()),
                        Value::Label(profile.construction_year.into()),
                        Value::Number(profile.bedrooms),
                        Value::Number(appliances.round().max(0.0)),
                    ],
                    extras: Default::default(),
                });
                let mut jit = || 1.0 + cfg.jitter * rng.random_range(-1.0..1.0);
                let base = profile.base_load * jit();
                let heat = profile.heating_slope * jit();
                let solar = profile.solar_slope * jit();
                let weekend = 1.0 + (profile.weekend_factor - 1.0) * jit();
                let values = (0..cfg.days)
                    .map(|d| {
                        let date = cfg.start + Days::new(d as u64);
                        let t = weather[0].values[d].expect("generated weather is complete");
                        let s = weather[1].values[d].expect("generated weather is complete");
                        let mut e = base + heat * (profile.heating_setpoint - t).max(0.0) + solar * s;
                        if is_weekend(date) {
                            e *= weekend;
                        }
                        e *= 1.0 + cfg.noise * unit.sample(&mut rng);
                        Some(e.max(0.1))
                    })
                    .collect();
                buildings.push(BuildingSeries {
                    building_id: id.clone(),
                    energy: DailySeries::from_values(&id, "kWh", cfg.start, values),
                    weather: weather.clone(),
                });
                groups.push(g);
            }
        }
        Ok(SyntheticFleet {
            descriptions: DescriptionTable::new(schema, rows)?,
            buildings,
            groups,
            station_id,
            weather,
            start: cfg.start,
            days: cfg.days,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.buildings.iter().map(|b| b.building_id.clone()).collect()
    }

    /// The first `train_days` days.
    pub fn train_range(&self, train_days: usize) -> DateRange {
        DateRange {
            start: self.start,
            end: self.start + Days::new(train_days as u64 - 1),
        }
    }

    /// Everything after the first `train_days` days.
    pub fn test_range(&self, train_days: usize) -> DateRange {
        DateRange {
            start: self.start + Days::new(train_days as u64),
            end: self.start + Days::new(self.days as u64 - 1),
        }
    }

    /// Writes the fleet as raw ingestible files: `metadata.csv`,
    /// `schema.txt`, `links.csv`, one `energy/<id>.csv` per building
    /// (`unix_ts,value` readings every `interval_s` seconds whose daily sums
    /// equal the daily consumption in Wh) and `weather/<station>.csv`.
    pub fn write_raw(&self, dir: &Path, interval_s: i64) -> Result<()> {
        if interval_s <= 0 || 86_400 % interval_s != 0 {
            return Err(Error::invalid("sampling interval must divide one day"));
        }
        let per_day = 86_400 / interval_s;
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(&dir.join("energy"))?;
        mkdir(&dir.join("weather"))?;
        let write = |p: &Path, s: &str| fs::write(p, s).map_err(|e| Error::io(p, e));
        write(&dir.join("metadata.csv"), &self.descriptions.to_csv())?;
        write(&dir.join("schema.txt"), SCHEMA_TEXT)?;
        let mut links = String::from("building_id,series_id,station_id\n");
        for b in &self.buildings {
            links.push_str(&format!("{0},{0},{1}\n", b.building_id, self.station_id));
        }
        write(&dir.join("links.csv"), &links)?;
        let epoch = |d: NaiveDate| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
        for b in &self.buildings {
            let mut s = String::from("unix_ts,value\n");
            for (d, v) in b.energy.observed() {
                let per_reading = v * 1000.0 / per_day as f64;
                let t0 = epoch(d);
                for k in 0..per_day {
                    s.push_str(&format!("{},{}\n", t0 + k * interval_s, per_reading));
                }
            }
            write(&dir.join("energy").join(format!("{}.csv", b.building_id)), &s)?;
        }
        let mut s = String::from("unix_ts,air_temp,solar_irradiance,wind_speed\n");
        for d in 0..self.days {
            let date = self.start + Days::new(d as u64);
            let t0 = epoch(date);
            let day: Vec<f64> = self.weather.iter().map(|w| w.values[d].unwrap_or(0.0)).collect();
            for k in 0..per_day {
                s.push_str(&format!("{},{},{},{}\n", t0 + k * interval_s, day[0], day[1], day[2]));
            }
        }
        write(&dir.join("weather").join(format!("{}.csv", self.station_id)), &s)?;
        Ok(())
    }
}

fn is_weekend(d: NaiveDate) -> bool {
    use chrono::Datelike;
    matches!(d.weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun)
}

fn generate_weather(station: &str, start: NaiveDate, days: usize, rng: &mut ChaCha8Rng) -> [DailySeries; 3] {
    use chrono::Datelike;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut temp_anom = 0.0;
    let mut temp = Vec::with_capacity(days);
    let mut solar = Vec::with_capacity(days);
    let mut wind = Vec::with_capacity(days);
    for d in 0..days {
        let date = start + Days::new(d as u64);
        let phase = 2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 105.0) / 365.25;
        temp_anom = 0.7 * temp_anom + 2.0 * unit.sample(rng);
        temp.push(Some(10.0 + 8.0 * phase.sin() + temp_anom));
        let cloud: f64 = rng.random_range(0.3..1.0);
        solar.push(Some(((140.0 + 110.0 * phase.sin()) * cloud).max(0.0)));
        wind.push(Some(4.0 + 2.0 * unit.sample(rng).abs()));
    }
    [
        DailySeries::from_values(&format!("{station}/air_temp"), "degC", start, temp),
        DailySeries::from_values(&format!("{station}/solar_irradiance"), "W/m2", start, solar),
        DailySeries::from_values(&format!("{station}/wind_speed"), "m/s", start, wind),
    ]
}

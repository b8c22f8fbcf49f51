//! File-backed stores: building descriptions with their links to energy
//! series and weather stations, daily energy series and daily weather.
//!
//! ```text
//! <root>/schema.txt
//! <root>/descriptions.csv
//! <root>/links.csv              building_id,series_id,station_id
//! <root>/energy/<series_id>.csv date,value
//! <root>/weather/<station>.csv  date,air_temp,solar_irradiance,wind_speed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{load_descriptions, BuildingDescription, DescriptionTable, LoadOptions, Schema};
use crate::selection::SeriesSource;
use crate::timeseries::{BuildingSeries, DailySeries, WEATHER_CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub building_id: String,
    pub series_id: String,
    pub station_id: String,
}

#[derive(Debug, Clone)]
pub struct StoreCatalog {
    root: PathBuf,
    descriptions: DescriptionTable,
    links: BTreeMap<String, Link>,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Store keys become file names.
fn check_key(kind: &str, key: &str) -> Result<()> {
    let ok = !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !key.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Store(format!("{kind} `{key}` is not a valid store key")))
    }
}

impl StoreCatalog {
    /// Creates (or resets the description table of) a store at `root`.
    pub fn create(root: &Path, schema: Schema) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let cat = StoreCatalog {
            root: root.to_path_buf(),
            descriptions: DescriptionTable::new(schema, vec![])?,
            links: BTreeMap::new(),
        };
        cat.flush_contextual()?;
        Ok(cat)
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("schema.txt").is_file() {
            return Err(Error::Store(format!("no store at {}", root.display())));
        }
        let schema = Schema::load(&root.join("schema.txt"))?;
        let descriptions = load_descriptions(&root.join("descriptions.csv"), &schema, &LoadOptions::default())?;
        let mut links = BTreeMap::new();
        let path = root.join("links.csv");
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&path)
            .map_err(|e| Error::Store(format!("{}: {e}", path.display())))?;
        for rec in rdr.deserialize::<Link>() {
            let l = rec?;
            links.insert(l.building_id.clone(), l);
        }
        let cat = StoreCatalog {
            root: root.to_path_buf(),
            descriptions,
            links,
        };
        cat.validate()?;
        Ok(cat)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn schema(&self) -> &Schema {
        &self.descriptions.schema
    }

    pub fn descriptions(&self) -> &DescriptionTable {
        &self.descriptions
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn link(&self, building_id: &str) -> Result<&Link> {
        self.links
            .get(building_id)
            .ok_or_else(|| Error::NotFound(format!("link for building `{building_id}`")))
    }

    fn energy_path(&self, series_id: &str) -> PathBuf {
        self.root.join("energy").join(format!("{series_id}.csv"))
    }

    fn weather_path(&self, station: &str) -> PathBuf {
        self.root.join("weather").join(format!("{station}.csv"))
    }

    fn flush_contextual(&self) -> Result<()> {
        write_atomic(&self.root.join("schema.txt"), &self.descriptions.schema.to_text())?;
        write_atomic(&self.root.join("descriptions.csv"), &self.descriptions.to_csv())?;
        let mut s = String::from("building_id,series_id,station_id\n");
        for l in self.links.values() {
            s.push_str(&format!("{},{},{}\n", l.building_id, l.series_id, l.station_id));
        }
        write_atomic(&self.root.join("links.csv"), &s)
    }

    /// Inserts or replaces a description and its link. The linked energy
    /// series and weather station must already be stored.
    pub fn put_building(&mut self, d: BuildingDescription, link: Link) -> Result<()> {
        if d.building_id != link.building_id {
            return Err(Error::Store("description and link name different buildings".into()));
        }
        check_key("building id", &d.building_id)?;
        if !self.energy_path(&link.series_id).is_file() {
            return Err(Error::Store(format!("link references unknown series `{}`", link.series_id)));
        }
        if !self.weather_path(&link.station_id).is_file() {
            return Err(Error::Store(format!("link references unknown station `{}`", link.station_id)));
        }
        let mut rows: Vec<BuildingDescription> = self
            .descriptions
            .rows
            .iter()
            .filter(|r| r.building_id != d.building_id)
            .cloned()
            .collect();
        rows.push(d);
        rows.sort_by(|a, b| crate::selection::compare_ids(&a.building_id, &b.building_id));
        self.descriptions = DescriptionTable::new(self.descriptions.schema.clone(), rows)?;
        self.links.insert(link.building_id.clone(), link);
        self.flush_contextual()
    }

    pub fn put_energy(&self, series_id: &str, s: &DailySeries) -> Result<()> {
        check_key("series id", series_id)?;
        write_atomic(&self.energy_path(series_id), &format!("# unit: {}\n{}", s.unit, s.to_csv()))
    }

    pub fn energy(&self, series_id: &str) -> Result<DailySeries> {
        let path = self.energy_path(series_id);
        if !path.is_file() {
            return Err(Error::NotFound(format!("energy series `{series_id}`")));
        }
        let text = read(&path)?;
        let unit = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# unit:"))
            .map(str::trim)
            .unwrap_or("");
        DailySeries::from_csv(series_id, unit, &text)
    }

    pub fn put_weather(&self, station: &str, w: &[DailySeries; 3]) -> Result<()> {
        check_key("station id", station)?;
        let start = w.iter().map(|s| s.start).min().expect("three channels");
        let end = w.iter().map(|s| s.end()).max().expect("three channels");
        let mut s = format!("date,{}\n", WEATHER_CHANNELS.join(","));
        let mut d = start;
        while d <= end {
            s.push_str(&d.to_string());
            for c in w {
                s.push(',');
                if let Some(v) = c.get(d) {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
            d = d.succ_opt().expect("date in range");
        }
        write_atomic(&self.weather_path(station), &s)
    }

    pub fn weather(&self, station: &str) -> Result<[DailySeries; 3]> {
        let path = self.weather_path(station);
        if !path.is_file() {
            return Err(Error::NotFound(format!("weather station `{station}`")));
        }
        let text = read(&path)?;
        let mut cols: [Vec<(NaiveDate, Option<f64>)>; 3] = Default::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |m: &str| Error::Format {
                path: path.clone(),
                line: i as u64 + 1,
                message: m.to_string(),
            };
            if cells.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let d = NaiveDate::from_str(cells[0]).map_err(|_| bad("bad date"))?;
            for (c, cell) in cols.iter_mut().zip(&cells[1..]) {
                let v = if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| bad("bad value"))?)
                };
                c.push((d, v));
            }
        }
        let [a, b, c] = cols;
        let ch = |i: usize, v| DailySeries::from_pairs(&format!("{station}/{}", WEATHER_CHANNELS[i]), "", v);
        Ok([ch(0, a)?, ch(1, b)?, ch(2, c)?])
    }

    /// Every link must reference a stored description, series and station.
    pub fn validate(&self) -> Result<()> {
        for l in self.links.values() {
            if self.descriptions.get(&l.building_id).is_none() {
                return Err(Error::Store(format!("link for unknown building `{}`", l.building_id)));
            }
            if !self.energy_path(&l.series_id).is_file() {
                return Err(Error::Store(format!("link to unknown series `{}`", l.series_id)));
            }
            if !self.weather_path(&l.station_id).is_file() {
                return Err(Error::Store(format!("link to unknown station `{}`", l.station_id)));
            }
        }
        Ok(())
    }

    /// Writes a synthetic fleet (daily data, already aggregated) to `root`.
    pub fn from_fleet(root: &Path, fleet: &crate::synthetic::SyntheticFleet) -> Result<Self> {
        let mut cat = StoreCatalog::create(root, fleet.descriptions.schema.clone())?;
        cat.put_weather(&fleet.station_id, &fleet.weather)?;
        for (b, d) in fleet.buildings.iter().zip(&fleet.descriptions.rows) {
            cat.put_energy(&b.building_id, &b.energy)?;
            cat.put_building(
                d.clone(),
                Link {
                    building_id: b.building_id.clone(),
                    series_id: b.building_id.clone(),
                    station_id: fleet.station_id.clone(),
                },
            )?;
        }
        Ok(cat)
    }
}

impl SeriesSource for StoreCatalog {
    fn building_series(&self, id: &str) -> Result<BuildingSeries> {
        let link = self.link(id)?;
        Ok(BuildingSeries {
            building_id: id.to_string(),
            energy: self.energy(&link.series_id)?,
            weather: self.weather(&link.station_id)?,
        })
    }
}

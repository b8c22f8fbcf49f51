//! Raw load/weather ingestion, daily resampling, min-max normalization and
//! the 7-day sliding-window dataset fed to the forecaster.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Days per input (and per target) sequence.
pub const WEEK: usize = 7;
/// Features per input step.
pub const N_FEATURES: usize = 7;
/// Consecutive valid days needed for one window.
pub const WINDOW_SPAN: usize = 2 * WEEK;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "consumption",
    "air_temp",
    "solar_irradiance",
    "wind_speed",
    "next_air_temp",
    "next_solar_irradiance",
    "next_wind_speed",
];

pub const WEATHER_CHANNELS: [&str; 3] = ["air_temp", "solar_irradiance", "wind_speed"];

/// High-frequency readings sorted by strictly increasing unix timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub id: String,
    pub unit: String,
    pub points: Vec<(i64, f64)>,
}

impl RawSeries {
    /// Sorts by timestamp and keeps the last value for repeated timestamps.
    pub fn from_unsorted(id: &str, unit: &str, points: Vec<(i64, f64)>) -> Result<Self> {
        if let Some((ts, v)) = points.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {v} at {ts}")));
        }
        let mut points = points;
        // stable: equal timestamps keep file order, so the last one is the latest row
        points.sort_by_key(|p| p.0);
        let mut out: Vec<(i64, f64)> = Vec::with_capacity(points.len());
        for p in points {
            match out.last_mut() {
                Some(last) if last.0 == p.0 => *last = p,
                _ => out.push(p),
            }
        }
        Ok(RawSeries {
            id: id.to_string(),
            unit: unit.to_string(),
            points: out,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Which columns of a delimited raw file hold the timestamp and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub timestamp: String,
    pub values: Vec<String>,
    pub delimiter: u8,
}

impl ColumnMap {
    pub fn load() -> Self {
        ColumnMap {
            timestamp: "unix_ts".into(),
            values: vec!["value".into()],
            delimiter: b',',
        }
    }

    /// The column names used by the public REFIT cleaned export.
    pub fn refit() -> Self {
        ColumnMap {
            timestamp: "Unix".into(),
            values: vec!["Aggregate".into()],
            delimiter: b',',
        }
    }

    pub fn weather() -> Self {
        ColumnMap {
            timestamp: "unix_ts".into(),
            values: WEATHER_CHANNELS.iter().map(|s| s.to_string()).collect(),
            delimiter: b',',
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub duplicates_dropped: usize,
    pub out_of_order: usize,
}

fn parse_timestamp(cell: &str) -> Option<i64> {
    let cell = cell.trim();
    cell.parse::<i64>()
        .ok()
        .or_else(|| cell.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v.floor() as i64))
}

/// Reads rows of a raw file, calling `sink(ts, values)` per row without
/// buffering the whole file.
pub fn for_each_raw_row(
    path: &Path,
    cols: &ColumnMap,
    mut sink: impl FnMut(i64, &[f64]),
) -> Result<usize> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(cols.delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(std::io::BufReader::new(file));
    let header = rdr.headers()?.clone();
    let pos = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let ts_pos = pos(&cols.timestamp)?;
    let val_pos: Vec<usize> = cols.values.iter().map(|c| pos(c)).collect::<Result<_>>()?;
    let mut rec = csv::StringRecord::new();
    let mut values = vec![0.0; val_pos.len()];
    let mut rows = 0;
    loop {
        let more = rdr.read_record(&mut rec).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let ts_cell = rec.get(ts_pos).unwrap_or("");
        let ts = parse_timestamp(ts_cell).ok_or_else(|| bad(format!("unparseable timestamp `{ts_cell}`")))?;
        for (slot, &p) in values.iter_mut().zip(&val_pos) {
            let cell = rec.get(p).unwrap_or("");
            *slot = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("unparseable value `{cell}`")))?;
        }
        sink(ts, &values);
        rows += 1;
    }
    Ok(rows)
}

/// Loads one value column per entry of `cols.values`, each sorted and
/// de-duplicated with the last row winning.
pub fn load_raw_channels(path: &Path, id: &str, unit: &str, cols: &ColumnMap) -> Result<(Vec<RawSeries>, LoadReport)> {
    let mut buffers: Vec<Vec<(i64, f64)>> = vec![Vec::new(); cols.values.len()];
    let mut report = LoadReport::default();
    let mut prev: Option<i64> = None;
    let rows = for_each_raw_row(path, cols, |ts, vals| {
        if prev.is_some_and(|p| ts < p) {
            report.out_of_order += 1;
        }
        prev = Some(ts);
        for (b, v) in buffers.iter_mut().zip(vals) {
            b.push((ts, *v));
        }
    })?;
    if rows == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: "empty file".into(),
        });
    }
    report.rows_read = rows;
    let series = buffers
        .into_iter()
        .zip(&cols.values)
        .map(|(b, name)| {
            let sid = if cols.values.len() == 1 {
                id.to_string()
            } else {
                format!("{id}/{name}")
            };
            RawSeries::from_unsorted(&sid, unit, b)
        })
        .collect::<Result<Vec<_>>>()?;
    report.duplicates_dropped = rows - series[0].len();
    Ok((series, report))
}

pub fn load_raw(path: &Path, id: &str, unit: &str, cols: &ColumnMap) -> Result<(RawSeries, LoadReport)> {
    let (mut s, r) = load_raw_channels(path, id, unit, cols)?;
    Ok((s.swap_remove(0), r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DailyAggregate {
    Sum,
    Mean,
}

/// When a day counts as observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Readings expected per full day; inferred from the median sampling
    /// interval when `None`.
    pub expected_per_day: Option<f64>,
    /// Minimum observed/expected ratio for a day to be valid.
    pub threshold: f64,
}

impl Default for Coverage {
    fn default() -> Self {
        Coverage {
            expected_per_day: None,
            threshold: 0.9,
        }
    }
}

impl Coverage {
    pub fn with_interval(seconds: f64) -> Self {
        Coverage {
            expected_per_day: Some(86_400.0 / seconds),
            ..Coverage::default()
        }
    }
}

fn utc_date(ts: i64) -> NaiveDate {
    DateTime::from_timestamp(ts.div_euclid(86_400) * 86_400, 0)
        .expect("timestamp in chrono range")
        .date_naive()
}

/// Per-day running count and sum over UTC day boundaries. Partial
/// accumulators merge, so a series can be aggregated in chunks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DailyAccumulator {
    days: BTreeMap<NaiveDate, (usize, f64)>,
    min_dt: Option<i64>,
    deltas: Vec<i64>,
    last_ts: Option<i64>,
}

impl DailyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ts: i64, value: f64) {
        let e = self.days.entry(utc_date(ts)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += value;
        if let Some(prev) = self.last_ts {
            let dt = ts - prev;
            if dt > 0 && self.deltas.len() < 10_000 {
                self.deltas.push(dt);
            }
            self.min_dt = Some(self.min_dt.map_or(dt, |m| m.min(dt)));
        }
        self.last_ts = Some(ts);
    }

    pub fn merge(&mut self, other: &DailyAccumulator) {
        for (d, (n, s)) in &other.days {
            let e = self.days.entry(*d).or_insert((0, 0.0));
            e.0 += n;
            e.1 += s;
        }
        self.deltas.extend(other.deltas.iter().copied());
        self.last_ts = self.last_ts.max(other.last_ts);
    }

    fn median_interval(&self) -> Option<f64> {
        if self.deltas.is_empty() {
            return None;
        }
        let mut d = self.deltas.clone();
        d.sort_unstable();
        Some(d[d.len() / 2] as f64)
    }

    pub fn finish(&self, id: &str, unit: &str, agg: DailyAggregate, coverage: &Coverage) -> Result<DailySeries> {
        let (first, last) = match (self.days.keys().next(), self.days.keys().next_back()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(Error::invalid(format!("series `{id}` is empty"))),
        };
        let expected = coverage
            .expected_per_day
            .or_else(|| self.median_interval().map(|dt| 86_400.0 / dt))
            .unwrap_or(1.0);
        let n_days = (last - first).num_days() as usize + 1;
        let mut values = vec![None; n_days];
        for (d, (n, s)) in &self.days {
            if (*n as f64) / expected + 1e-12 < coverage.threshold {
                continue;
            }
            let idx = (*d - first).num_days() as usize;
            values[idx] = Some(match agg {
                DailyAggregate::Sum => *s,
                DailyAggregate::Mean => *s / *n as f64,
            });
        }
        Ok(DailySeries {
            id: id.to_string(),
            unit: unit.to_string(),
            start: first,
            values,
        })
    }
}

/// One optional value per calendar day over a contiguous date span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub id: String,
    pub unit: String,
    pub start: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn from_values(id: &str, unit: &str, start: NaiveDate, values: Vec<Option<f64>>) -> Self {
        DailySeries {
            id: id.to_string(),
            unit: unit.to_string(),
            start,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> NaiveDate {
        self.date_at(self.values.len().saturating_sub(1))
    }

    pub fn date_at(&self, idx: usize) -> NaiveDate {
        self.start + Days::new(idx as u64)
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        let off = (date - self.start).num_days();
        if off < 0 {
            return None;
        }
        self.values.get(off as usize).copied().flatten()
    }

    pub fn observed(&self) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|x| (self.date_at(i), x)))
    }

    pub fn valid_days(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// `date,value` text; missing days have an empty value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("date,value\n");
        for (i, v) in self.values.iter().enumerate() {
            match v {
                Some(x) => s.push_str(&format!("{},{}\n", self.date_at(i), x)),
                None => s.push_str(&format!("{},\n", self.date_at(i))),
            }
        }
        s
    }

    pub fn from_csv(id: &str, unit: &str, text: &str) -> Result<Self> {
        let mut pairs: Vec<(NaiveDate, Option<f64>)> = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.starts_with("date") {
                    continue;
                }
            }
            let (d, v) = line
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `date,value`", i + 1)))?;
            let date = NaiveDate::from_str(d.trim())
                .map_err(|_| Error::invalid(format!("line {}: bad date `{d}`", i + 1)))?;
            let v = v.trim();
            let value = if v.is_empty() || v == "NA" {
                None
            } else {
                Some(v.parse::<f64>().map_err(|_| Error::invalid(format!("line {}: bad value `{v}`", i + 1)))?)
            };
            pairs.push((date, value));
        }
        Self::from_pairs(id, unit, pairs)
    }

    /// Builds a contiguous series from dated values; gaps become missing.
    pub fn from_pairs(id: &str, unit: &str, mut pairs: Vec<(NaiveDate, Option<f64>)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("series `{id}` repeats a date")));
        }
        let Some(start) = pairs.first().map(|p| p.0) else {
            return Err(Error::invalid(format!("series `{id}` is empty")));
        };
        let end = pairs.last().map(|p| p.0).unwrap_or(start);
        let mut values = vec![None; (end - start).num_days() as usize + 1];
        for (d, v) in pairs {
            values[(d - start).num_days() as usize] = v;
        }
        Ok(DailySeries::from_values(id, unit, start, values))
    }
}

fn accumulate(s: &RawSeries) -> Result<DailyAccumulator> {
    if s.is_empty() {
        return Err(Error::invalid(format!("series `{}` is empty", s.id)));
    }
    let mut acc = DailyAccumulator::new();
    for &(ts, v) in &s.points {
        acc.push(ts, v);
    }
    Ok(acc)
}

/// Sum of all readings per UTC day; under-covered days are missing.
pub fn resample_daily_sum(s: &RawSeries, coverage: &Coverage) -> Result<DailySeries> {
    accumulate(s)?.finish(&s.id, &s.unit, DailyAggregate::Sum, coverage)
}

/// Arithmetic mean of readings per UTC day; under-covered days are missing.
pub fn resample_daily_mean(s: &RawSeries, coverage: &Coverage) -> Result<DailySeries> {
    accumulate(s)?.finish(&s.id, &s.unit, DailyAggregate::Mean, coverage)
}

/// Aggregates a raw file to daily resolution in one streaming pass. Rows
/// must already be ordered and free of repeated timestamps.
pub fn load_daily_streaming(
    path: &Path,
    id: &str,
    unit: &str,
    cols: &ColumnMap,
    agg: DailyAggregate,
    coverage: &Coverage,
) -> Result<Vec<DailySeries>> {
    let mut accs = vec![DailyAccumulator::new(); cols.values.len()];
    for_each_raw_row(path, cols, |ts, vals| {
        for (a, v) in accs.iter_mut().zip(vals) {
            a.push(ts, *v);
        }
    })?;
    accs.iter()
        .zip(&cols.values)
        .map(|(a, name)| {
            let sid = if cols.values.len() == 1 {
                id.to_string()
            } else {
                format!("{id}/{name}")
            };
            a.finish(&sid, unit, agg, coverage)
        })
        .collect()
}

/// Inclusive calendar date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::invalid(format!("date range {start}..{end} is reversed")));
        }
        Ok(DateRange { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }
}

impl fmt::Display for DateRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for DateRange {
    type Err = Error;

    /// `YYYY-MM-DD..YYYY-MM-DD`
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::invalid(format!("expected `A..B` date range, got `{s}`")))?;
        let p = |x: &str| {
            NaiveDate::from_str(x.trim()).map_err(|_| Error::invalid(format!("bad date `{x}`")))
        };
        DateRange::new(p(a)?, p(b)?)
    }
}

/// Min-max statistics of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut it = values.into_iter().peekable();
        if it.peek().is_none() {
            return Err(Error::invalid("cannot fit min-max statistics on no values"));
        }
        let (min, max) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Ok(MinMax { min, max })
    }

    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    /// Constant features map to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }

    pub fn merge(&self, other: &MinMax) -> MinMax {
        MinMax {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Per-feature (min, max) over the observed values of each series within
/// `range` (all days when `None`).
pub fn fit_minmax(series: &[&DailySeries], range: Option<DateRange>) -> Result<Vec<MinMax>> {
    series
        .iter()
        .map(|s| {
            MinMax::fit(
                s.observed()
                    .filter(|(d, _)| range.is_none_or(|r| r.contains(*d)))
                    .map(|(_, v)| v),
            )
            .map_err(|_| Error::invalid(format!("series `{}` has no values in the fitting range", s.id)))
        })
        .collect()
}

/// Daily energy plus the three weather channels for one building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingSeries {
    pub building_id: String,
    pub energy: DailySeries,
    pub weather: [DailySeries; 3],
}

impl BuildingSeries {
    fn channels(&self) -> [&DailySeries; 4] {
        [&self.energy, &self.weather[0], &self.weather[1], &self.weather[2]]
    }

    /// Day is usable when energy and all weather channels are observed.
    fn day(&self, d: NaiveDate) -> Option<[f64; 4]> {
        Some([
            self.energy.get(d)?,
            self.weather[0].get(d)?,
            self.weather[1].get(d)?,
            self.weather[2].get(d)?,
        ])
    }
}

/// Normalization statistics for the four channels in the order
/// consumption, air temperature, solar irradiance, wind speed. Next-week
/// weather features reuse the weather channel statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub channels: [MinMax; 4],
    /// Clip normalized values into [0, 1].
    pub clip: bool,
}

impl NormalizationStats {
    /// Fits on one or more buildings jointly, over days within `range`.
    pub fn fit(buildings: &[&BuildingSeries], range: Option<DateRange>) -> Result<Self> {
        let mut channels: Option<[MinMax; 4]> = None;
        for b in buildings {
            let fitted = fit_minmax(&b.channels(), range)?;
            let arr = [fitted[0], fitted[1], fitted[2], fitted[3]];
            channels = Some(match channels {
                None => arr,
                Some(c) => [c[0].merge(&arr[0]), c[1].merge(&arr[1]), c[2].merge(&arr[2]), c[3].merge(&arr[3])],
            });
        }
        let channels = channels.ok_or_else(|| Error::invalid("no buildings to fit statistics on"))?;
        Ok(NormalizationStats { channels, clip: false })
    }

    pub fn feature(&self, f: usize) -> MinMax {
        // features 4..7 are next-week weather, channels 1..4
        self.channels[if f < 4 { f } else { f - 3 }]
    }

    pub fn normalize(&self, f: usize, v: f64) -> f64 {
        let x = self.feature(f).normalize(v);
        if self.clip {
            x.clamp(0.0, 1.0)
        } else {
            x
        }
    }

    pub fn consumption(&self) -> MinMax {
        self.channels[0]
    }
}

/// One (input, target) training pair on the normalized scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub input: [[f64; N_FEATURES]; WEEK],
    pub target: [f64; WEEK],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSource {
    pub building_id: String,
    pub start: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub windows: Vec<Window>,
    pub provenance: Vec<WindowSource>,
    pub stats: NormalizationStats,
    /// Why the dataset is empty, when it is.
    pub diagnostic: Option<String>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Concatenates datasets built with identical statistics.
    pub fn concat(parts: Vec<SequenceDataset>) -> Result<SequenceDataset> {
        let mut it = parts.into_iter();
        let mut out = it.next().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        for p in it {
            if p.stats != out.stats {
                return Err(Error::invalid("datasets were normalized with different statistics"));
            }
            out.windows.extend(p.windows);
            out.provenance.extend(p.provenance);
        }
        out.diagnostic = out.windows.is_empty().then(|| "no windows".to_string());
        Ok(out)
    }

    pub fn source_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for p in &self.provenance {
            if !ids.contains(&p.building_id) {
                ids.push(p.building_id.clone());
            }
        }
        ids
    }
}

/// Assembles one input window from raw (unnormalized) channel values.
pub fn window_input(
    stats: &NormalizationStats,
    current_consumption: &[f64; WEEK],
    current_weather: &[[f64; 3]; WEEK],
    next_weather: &[[f64; 3]; WEEK],
) -> [[f64; N_FEATURES]; WEEK] {
    let mut input = [[0.0; N_FEATURES]; WEEK];
    for t in 0..WEEK {
        let raw = [
            current_consumption[t],
            current_weather[t][0],
            current_weather[t][1],
            current_weather[t][2],
            next_weather[t][0],
            next_weather[t][1],
            next_weather[t][2],
        ];
        for f in 0..N_FEATURES {
            input[t][f] = stats.normalize(f, raw[f]);
        }
    }
    input
}

/// Slides a 14-day span over the building's days (stride 1). Days 0..7 give
/// consumption and weather, days 7..14 give next-week weather and the
/// consumption targets. Only spans of consecutive fully observed days inside
/// `range` produce windows.
pub fn build_windows(b: &BuildingSeries, stats: &NormalizationStats, range: Option<DateRange>) -> SequenceDataset {
    let mut start = b.energy.start;
    let mut end = b.energy.end();
    if let Some(r) = range {
        start = start.max(r.start);
        end = end.min(r.end);
    }
    let mut days: Vec<(NaiveDate, Option<[f64; 4]>)> = Vec::new();
    let mut d = start;
    while d <= end {
        days.push((d, b.day(d)));
        d = d + Days::new(1);
    }
    let mut windows = Vec::new();
    let mut provenance = Vec::new();
    let mut run = 0usize;
    for i in 0..days.len() {
        run = if days[i].1.is_some() { run + 1 } else { 0 };
        if run < WINDOW_SPAN {
            continue;
        }
        let s = i + 1 - WINDOW_SPAN;
        let mut cur_c = [0.0; WEEK];
        let mut cur_w = [[0.0; 3]; WEEK];
        let mut next_w = [[0.0; 3]; WEEK];
        let mut target = [0.0; WEEK];
        for t in 0..WEEK {
            let now = days[s + t].1.expect("run is fully observed");
            let next = days[s + WEEK + t].1.expect("run is fully observed");
            cur_c[t] = now[0];
            cur_w[t] = [now[1], now[2], now[3]];
            next_w[t] = [next[1], next[2], next[3]];
            target[t] = stats.normalize(0, next[0]);
        }
        windows.push(Window {
            input: window_input(stats, &cur_c, &cur_w, &next_w),
            target,
        });
        provenance.push(WindowSource {
            building_id: b.building_id.clone(),
            start: days[s].0,
        });
    }
    let diagnostic = windows.is_empty().then(|| {
        format!(
            "building `{}` has no run of {WINDOW_SPAN} consecutive valid days{}",
            b.building_id,
            range.map(|r| format!(" within {r}")).unwrap_or_default()
        )
    });
    SequenceDataset {
        windows,
        provenance,
        stats: *stats,
        diagnostic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::from_str(s).unwrap()
    }

    fn building(valid: &[bool]) -> BuildingSeries {
        let start = date("2014-04-01");
        let mk = |id: &str, f: &dyn Fn(usize) -> f64| {
            DailySeries::from_values(
                id,
                "u",
                start,
                valid
                    .iter()
                    .enumerate()
                    .map(|(i, ok)| ok.then(|| f(i)))
                    .collect(),
            )
        };
        BuildingSeries {
            building_id: "b".into(),
            energy: mk("e", &|i| 10.0 + i as f64),
            weather: [
                mk("t", &|i| (i % 5) as f64),
                mk("s", &|i| 100.0 + (i % 3) as f64),
                mk("w", &|i| 2.0 * (i % 4) as f64),
            ],
        }
    }

    fn stats_for(b: &BuildingSeries) -> NormalizationStats {
        NormalizationStats::fit(&[b], None).unwrap()
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn raw_load_sorts_and_dedups() {
        let f = write_tmp("unix_ts,value\n30,3\n10,1\n20,2\n");
        let (s, r) = load_raw(f.path(), "b", "W", &ColumnMap::load()).unwrap();
        assert_eq!(s.points, vec![(10, 1.0), (20, 2.0), (30, 3.0)]);
        assert_eq!(r.rows_read, 3);
        assert_eq!(r.out_of_order, 1);

        let f = write_tmp("unix_ts,value\n10,1\n10,7\n");
        let (s, r) = load_raw(f.path(), "b", "W", &ColumnMap::load()).unwrap();
        assert_eq!(s.points, vec![(10, 7.0)]);
        assert_eq!(r.duplicates_dropped, 1);
    }

    #[test]
    fn raw_load_errors() {
        let f = write_tmp("unix_ts,value\n");
        assert!(load_raw(f.path(), "b", "W", &ColumnMap::load()).is_err());
        let f = write_tmp("unix_ts,value\n10,1\nnoon,2\n");
        let err = load_raw(f.path(), "b", "W", &ColumnMap::load()).unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");
        let f = write_tmp("ts,value\n10,1\n");
        assert!(load_raw(f.path(), "b", "W", &ColumnMap::load()).is_err());
    }

    #[test]
    fn weather_channels_load_together() {
        let f = write_tmp("unix_ts,air_temp,solar_irradiance,wind_speed\n0,1,2,3\n3600,4,5,6\n");
        let (s, _) = load_raw_channels(f.path(), "st", "metric", &ColumnMap::weather()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].points, vec![(0, 3.0), (3600, 6.0)]);
        assert_eq!(s[1].id, "st/solar_irradiance");
    }

    #[test]
    fn daily_sum_and_coverage() {
        let s = RawSeries::from_unsorted("b", "W", vec![(0, 2.0), (8 * 3600, 3.0), (16 * 3600, 5.0)]).unwrap();
        let cov = Coverage::with_interval(8.0 * 3600.0);
        let d = resample_daily_sum(&s, &cov).unwrap();
        assert_eq!(d.values, vec![Some(10.0)]);
        assert_eq!(d.start, date("1970-01-01"));

        // half of the expected readings
        let half = RawSeries::from_unsorted("b", "W", vec![(0, 1.0)]).unwrap();
        let cov2 = Coverage::with_interval(12.0 * 3600.0);
        assert_eq!(resample_daily_sum(&half, &cov2).unwrap().values, vec![None]);

        let two: Vec<(i64, f64)> = (0..48).map(|h| (h * 3600, 1.0)).collect();
        let d = resample_daily_sum(&RawSeries::from_unsorted("b", "W", two).unwrap(), &Coverage::default()).unwrap();
        assert_eq!(d.values, vec![Some(24.0), Some(24.0)]);
        assert!(resample_daily_sum(&RawSeries::from_unsorted("b", "W", vec![]).unwrap(), &cov).is_err());
    }

    #[test]
    fn daily_mean_examples() {
        let s = RawSeries::from_unsorted("w", "C", vec![(0, 10.0), (43_200, 20.0)]).unwrap();
        assert_eq!(resample_daily_mean(&s, &Coverage::default()).unwrap().values, vec![Some(15.0)]);
        let c = RawSeries::from_unsorted("w", "C", (0..24).map(|h| (h * 3600, 4.25)).collect()).unwrap();
        assert_eq!(resample_daily_mean(&c, &Coverage::default()).unwrap().values, vec![Some(4.25)]);
    }

    #[test]
    fn gap_days_are_missing() {
        let pts: Vec<(i64, f64)> = (0..24).map(|h| (h * 3600, 1.0)).chain((48..72).map(|h| (h * 3600, 2.0))).collect();
        let d = resample_daily_sum(&RawSeries::from_unsorted("b", "W", pts).unwrap(), &Coverage::default()).unwrap();
        assert_eq!(d.values, vec![Some(24.0), None, Some(48.0)]);
        let back = DailySeries::from_csv("b", "W", &d.to_csv()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn streaming_load_matches_buffered() {
        let mut text = String::from("unix_ts,value\n");
        for i in 0..(3 * 24 * 6) {
            text.push_str(&format!("{},{}\n", i * 600, (i % 7) as f64));
        }
        let f = write_tmp(&text);
        let (raw, _) = load_raw(f.path(), "b", "W", &ColumnMap::load()).unwrap();
        let a = resample_daily_sum(&raw, &Coverage::default()).unwrap();
        let b = load_daily_streaming(f.path(), "b", "W", &ColumnMap::load(), DailyAggregate::Sum, &Coverage::default()).unwrap();
        assert_eq!(vec![a], b);
    }

    #[test]
    fn two_year_eight_second_stream() {
        // 2 * 365 * 86400 / 8 readings aggregated without buffering
        let n: i64 = 2 * 365 * 86_400 / 8;
        assert_eq!(n, 7_884_000);
        let mut acc = DailyAccumulator::new();
        for i in 0..n {
            acc.push(i * 8, 1.0);
        }
        let d = acc.finish("b", "W", DailyAggregate::Sum, &Coverage::default()).unwrap();
        assert_eq!(d.len(), 730);
        assert!(d.values.iter().all(|v| *v == Some(10_800.0)));
    }

    #[test]
    fn minmax_fit_and_apply() {
        let s = DailySeries::from_values("x", "u", date("2014-01-01"), vec![Some(0.0), Some(10.0)]);
        let st = fit_minmax(&[&s], None).unwrap();
        assert_eq!((st[0].min, st[0].max), (0.0, 10.0));

        let c = MinMax { min: 3.0, max: 3.0 };
        assert_eq!(c.normalize(3.0), 0.0);
        assert_eq!(c.normalize(8.0), 0.0);
    }

    #[test]
    fn fit_range_excludes_later_extremes() {
        let s = DailySeries::from_values("x", "u", date("2014-01-01"), vec![Some(0.0), Some(10.0), Some(30.0)]);
        let range = DateRange::from_str("2014-01-01..2014-01-02").unwrap();
        let st = fit_minmax(&[&s], Some(range)).unwrap()[0];
        assert_eq!(st.normalize(30.0), 3.0);
        let mut stats = NormalizationStats { channels: [st; 4], clip: false };
        assert_eq!(stats.normalize(0, 30.0), 3.0);
        stats.clip = true;
        assert_eq!(stats.normalize(0, 30.0), 1.0);
    }

    #[test]
    fn window_counts() {
        let b = building(&[true; 21]);
        assert_eq!(build_windows(&b, &stats_for(&b), None).len(), 8);
        let b = building(&[true; 14]);
        assert_eq!(build_windows(&b, &stats_for(&b), None).len(), 1);
        let mut v = [true; 14];
        v[6] = false;
        let b = building(&v);
        let ds = build_windows(&b, &stats_for(&b), None);
        assert!(ds.is_empty());
        assert!(ds.diagnostic.unwrap().contains("14 consecutive"));
    }

    #[test]
    fn weather_gap_breaks_runs() {
        let mut b = building(&[true; 21]);
        b.weather[1].values[10] = None;
        assert_eq!(build_windows(&b, &stats_for(&b), None).len(), 0);
    }

    #[test]
    fn window_layout() {
        let b = building(&[true; 14]);
        let stats = stats_for(&b);
        let w = build_windows(&b, &stats, None).windows[0];
        for t in 0..WEEK {
            assert_eq!(w.input[t][0], stats.normalize(0, 10.0 + t as f64));
            assert_eq!(w.input[t][1], stats.normalize(1, (t % 5) as f64));
            assert_eq!(w.input[t][4], stats.normalize(4, ((t + 7) % 5) as f64));
            assert_eq!(w.input[t][6], stats.normalize(6, 2.0 * ((t + 7) % 4) as f64));
            assert_eq!(w.target[t], stats.normalize(0, 17.0 + t as f64));
        }
        assert!(w.input.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn range_restricts_windows() {
        let b = building(&[true; 30]);
        let r = DateRange::from_str("2014-04-05..2014-04-20").unwrap();
        let ds = build_windows(&b, &stats_for(&b), Some(r));
        assert_eq!(ds.len(), 16 - 13);
        assert_eq!(ds.provenance[0].start, date("2014-04-05"));
    }

    #[test]
    fn date_range_parsing() {
        let r = DateRange::from_str("2014-04-22..2014-06-01").unwrap();
        assert_eq!(r.days(), 41);
        assert_eq!(r.to_string(), "2014-04-22..2014-06-01");
        assert!(DateRange::from_str("2014-06-01..2014-04-22").is_err());
        assert!(DateRange::from_str("2014-06-01").is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_runs(valid in prop::collection::vec(prop::bool::weighted(0.9), 14..80)) {
            let b = building(&valid);
            let expected: usize = valid
                .split(|v| !v)
                .map(|run| run.len().saturating_sub(WINDOW_SPAN - 1))
                .sum();
            prop_assert_eq!(build_windows(&b, &stats_for(&b), None).len(), expected);
        }

        #[test]
        fn normalize_round_trip(lo in -1e3f64..1e3, span in 1e-3f64..1e3, x in -2e3f64..2e3) {
            let mm = MinMax { min: lo, max: lo + span };
            let back = mm.denormalize(mm.normalize(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0) * (1.0 + (x - lo).abs() / span));
        }

        #[test]
        fn chunked_aggregation_matches_whole(
            vals in prop::collection::vec(0.0f64..100.0, 2..300),
            cut in 0usize..300,
        ) {
            let pts: Vec<(i64, f64)> = vals.iter().enumerate().map(|(i, v)| (i as i64 * 1800, *v)).collect();
            let cut = cut.min(pts.len());
            let cov = Coverage::with_interval(1800.0);
            let whole = resample_daily_sum(&RawSeries::from_unsorted("b", "W", pts.clone()).unwrap(), &cov).unwrap();
            let mut a = DailyAccumulator::new();
            let mut b = DailyAccumulator::new();
            for &(t, v) in &pts[..cut] { a.push(t, v); }
            for &(t, v) in &pts[cut..] { b.push(t, v); }
            a.merge(&b);
            let merged = a.finish("b", "W", DailyAggregate::Sum, &cov).unwrap();
            prop_assert_eq!(merged.start, whole.start);
            for (x, y) in merged.values.iter().zip(&whole.values) {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "coverage differs"),
                }
            }
        }
    }

    #[test]
    fn daily_mean_matches_direct_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..144).map(|_| rng.random_range(-20.0..40.0)).collect();
        let pts = vals.iter().enumerate().map(|(i, v)| (i as i64 * 600, *v)).collect();
        let d = resample_daily_mean(&RawSeries::from_unsorted("w", "C", pts).unwrap(), &Coverage::default()).unwrap();
        let mut direct = 0.0;
        for v in &vals {
            direct += v;
        }
        direct /= vals.len() as f64;
        assert!((d.values[0].unwrap() - direct).abs() < 1e-12);
    }
}

//! Ranks source buildings by description distance to an unseen target and
//! combines the chosen buildings' data into one training set.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{BuildingDescription, DescriptionPipeline, DescriptionTable, Encoding, Value};
use crate::similarity::euclidean;
use crate::timeseries::{build_windows, BuildingSeries, DateRange, NormalizationStats, SequenceDataset};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum SelectionRule {
    /// The `k` nearest sources.
    TopK(usize),
    /// Every source within this distance (inclusive).
    Threshold(f64),
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::TopK(DEFAULT_K)
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionRule::TopK(k) => write!(f, "top-k={k}"),
            SelectionRule::Threshold(d) => write!(f, "threshold={d}"),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = Error;

    /// Accepts `top-k=3`, `k=3`, `3` or `threshold=0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (key, val) = s.split_once('=').unwrap_or(("k", s));
        match key.trim() {
            "top-k" | "topk" | "k" => val
                .trim()
                .parse::<i64>()
                .ok()
                .filter(|k| *k > 0)
                .map(|k| SelectionRule::TopK(k as usize))
                .ok_or_else(|| Error::invalid(format!("k must be a positive integer, got `{val}`"))),
            "threshold" => val
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|d| d.is_finite() && *d >= 0.0)
                .map(SelectionRule::Threshold)
                .ok_or_else(|| Error::invalid(format!("threshold must be a non-negative number, got `{val}`"))),
            other => Err(Error::invalid(format!("unknown selection rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected sources, nearest first.
    pub ranked: Vec<(String, f64)>,
    pub pipeline: String,
    pub rule: SelectionRule,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# pipeline: {}\n# rule: {}\nrank,building_id,distance\n", self.pipeline, self.rule);
        for (i, (id, d)) in self.ranked.iter().enumerate() {
            s.push_str(&format!("{},{id},{d}\n", i + 1));
        }
        s
    }
}

/// Orders building ids numerically when both are integers, lexically
/// otherwise.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Ranks every source by Euclidean distance to `target` in the source-fitted
/// description space (impute, encode, min-max scale) and applies `rule`.
pub fn select_sources(
    target: &BuildingDescription,
    sources: &DescriptionTable,
    rule: SelectionRule,
    encoding: Encoding,
) -> Result<SelectionResult> {
    if sources.is_empty() {
        return Err(Error::invalid("no source buildings to select from"));
    }
    match rule {
        SelectionRule::TopK(0) => return Err(Error::invalid("k must be positive")),
        SelectionRule::Threshold(d) if !(d >= 0.0) => {
            return Err(Error::invalid("threshold must be a non-negative number"))
        }
        _ => {}
    }
    check_conforms(target, sources)?;
    let pipeline = DescriptionPipeline::fit(sources, encoding, true)?;
    let t = pipeline.transform_one(target)?;
    let mut ranked = Vec::with_capacity(sources.len());
    for row in &sources.rows {
        let r = pipeline.transform_one(row)?;
        ranked.push((row.building_id.clone(), euclidean(&t, &r)));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| compare_ids(&a.0, &b.0)));
    match rule {
        SelectionRule::TopK(k) => ranked.truncate(k),
        SelectionRule::Threshold(d) => ranked.retain(|(_, x)| *x <= d),
    }
    Ok(SelectionResult {
        ranked,
        pipeline: pipeline.tag(),
        rule,
    })
}

fn check_conforms(target: &BuildingDescription, sources: &DescriptionTable) -> Result<()> {
    let schema = &sources.schema;
    if target.values.len() != schema.columns.len() {
        return Err(Error::Schema(format!(
            "target has {} attributes, source schema has {}",
            target.values.len(),
            schema.columns.len()
        )));
    }
    for (c, v) in schema.columns.iter().zip(&target.values) {
        let ok = match v {
            Value::Missing => true,
            Value::Number(_) => c.kind.is_numeric(),
            Value::Label(_) => !c.kind.is_numeric(),
        };
        if !ok {
            return Err(Error::Schema(format!("value `{v}` does not fit attribute `{}`", c.name)));
        }
    }
    Ok(())
}

/// Anything that can hand out a building's daily energy and weather series.
pub trait SeriesSource {
    fn building_series(&self, id: &str) -> Result<BuildingSeries>;
}

impl SeriesSource for [BuildingSeries] {
    fn building_series(&self, id: &str) -> Result<BuildingSeries> {
        self.iter()
            .find(|b| b.building_id == id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("series for building `{id}`")))
    }
}

impl SeriesSource for Vec<BuildingSeries> {
    fn building_series(&self, id: &str) -> Result<BuildingSeries> {
        self.as_slice().building_series(id)
    }
}

impl SeriesSource for BTreeMap<String, BuildingSeries> {
    fn building_series(&self, id: &str) -> Result<BuildingSeries> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("series for building `{id}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledDataset {
    pub dataset: SequenceDataset,
    /// Buildings left out, with the reason.
    pub dropped: Vec<(String, String)>,
}

impl AssembledDataset {
    pub fn warnings(&self) -> Vec<String> {
        self.dropped
            .iter()
            .map(|(id, why)| format!("building {id} dropped: {why}"))
            .collect()
    }
}

/// Builds windows for every selected building within `range`, with
/// normalization fitted jointly over the buildings that contribute at least
/// one window. Buildings without windows are dropped with a warning.
pub fn assemble_training_set(
    selected: &SelectionResult,
    store: &(impl SeriesSource + ?Sized),
    range: Option<DateRange>,
) -> Result<AssembledDataset> {
    assemble_ids(&selected.ids(), store, range)
}

/// As [`assemble_training_set`] for an explicit id list.
pub fn assemble_ids(
    ids: &[String],
    store: &(impl SeriesSource + ?Sized),
    range: Option<DateRange>,
) -> Result<AssembledDataset> {
    if ids.is_empty() {
        return Err(Error::invalid("no buildings selected"));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for id in ids {
        let series = match store.building_series(id) {
            Ok(s) => s,
            Err(e) => {
                dropped.push((id.clone(), e.to_string()));
                continue;
            }
        };
        // window availability does not depend on the statistics
        let probe = NormalizationStats::fit(&[&series], None);
        let n = probe.map(|st| build_windows(&series, &st, range).len()).unwrap_or(0);
        if n == 0 {
            dropped.push((
                id.clone(),
                "no span of 14 consecutive days with energy and all weather channels in range".into(),
            ));
        } else {
            kept.push(series);
        }
    }
    for (id, why) in &dropped {
        log::warn!("building {id} dropped: {why}");
    }
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "every selected building was dropped ({})",
            dropped.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let refs: Vec<&BuildingSeries> = kept.iter().collect();
    let stats = NormalizationStats::fit(&refs, range)?;
    let parts = kept.iter().map(|b| build_windows(b, &stats, range)).collect();
    Ok(AssembledDataset {
        dataset: SequenceDataset::concat(parts)?,
        dropped,
    })
}

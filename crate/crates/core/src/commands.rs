//! Command-line front end. [`main_with_args`] parses arguments and runs one
//! subcommand; the `crossgrid` binary is a one-line wrapper around it.
//!
//! Every table written here is delimited text preceded by `#` comment lines
//! holding the command, seed, a JSON snapshot of the effective
//! configuration and SHA-256 digests of the inputs. No wall-clock data goes
//! into tables, so equal inputs give byte-identical tables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{
    clustering_agreement, description_clusters, error_matrix_clusters, train_fleet, transfer_matrix, EvalConfig,
};
use crate::metadata::{load_descriptions, BuildingDescription, DescriptionTable, Encoding, LoadOptions, Schema};
use crate::model::{checkpoint, train, ErrorScale, ForecastModel, ModelConfig};
use crate::selection::{assemble_ids, select_sources, SelectionRule, SeriesSource};
use crate::similarity::LinkageMethod;
use crate::svg::{self, SvgOptions};
use crate::synthetic::{FleetConfig, SyntheticFleet};
use crate::timeseries::{
    build_windows, load_raw, load_raw_channels, resample_daily_mean, resample_daily_sum, BuildingSeries, ColumnMap,
    Coverage, DailySeries, DateRange, NormalizationStats,
};
use crate::workflow::http::HttpServer;
use crate::workflow::{write_log, Link, StoreCatalog, Workflow, WorkflowConfig};

pub const DATA_DIR_ENV: &str = "CROSSGRID_DATA_DIR";
const DEFAULT_STORE: &str = "crossgrid-data";

#[derive(Debug, Parser)]
#[command(name = "crossgrid", version, about = "Model unseen buildings from similar source buildings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic fleet as raw ingestible files.
    Synth(SynthArgs),
    /// Import raw readings and metadata into a store.
    Ingest(IngestArgs),
    /// Cluster building descriptions and draw the dendrogram.
    Cluster(ClusterArgs),
    /// Rank source buildings for a target description.
    Select(SelectArgs),
    /// Train a forecaster on selected or explicit buildings.
    Train(TrainArgs),
    /// Train one model per building and test it on every building.
    EvalMatrix(EvalMatrixArgs),
    /// Run the request workflow behind an HTTP API until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Add a generation timestamp to SVG figures.
    #[arg(long)]
    pub svg_timestamp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StoreArg {
    #[arg(long, env = DATA_DIR_ENV, default_value = DEFAULT_STORE)]
    pub store: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterOpts {
    #[arg(long, default_value = "average", value_parser = parse_linkage)]
    pub linkage: LinkageMethod,
    #[arg(long, default_value_t = 0.7)]
    pub cut_fraction: f64,
    #[arg(long, default_value = "onehot", value_parser = parse_encoding)]
    pub encoding: Encoding,
}

#[derive(Debug, Clone, Args)]
pub struct RuleOpts {
    /// Keep the k nearest sources.
    #[arg(long, conflicts_with = "threshold")]
    pub k: Option<usize>,
    /// Keep every source within this distance.
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl RuleOpts {
    pub fn rule(&self) -> SelectionRule {
        match (self.k, self.threshold) {
            (_, Some(d)) => SelectionRule::Threshold(d),
            (Some(k), None) => SelectionRule::TopK(k),
            (None, None) => SelectionRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    /// LSTM 256, FC 128, up to 1000 epochs.
    Full,
    /// LSTM 32, FC 16, up to 200 epochs.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct ModelOpts {
    #[arg(long, value_enum, default_value = "full")]
    pub model_size: ModelSize,
    #[arg(long, value_enum)]
    pub batch_norm: Option<Switch>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Scale initial weights by 1/sqrt(fan_in).
    #[arg(long)]
    pub fan_in_init: bool,
}

impl ModelOpts {
    pub fn config(&self, seed: u64) -> Result<ModelConfig> {
        let mut c = match self.model_size {
            ModelSize::Full => ModelConfig::default(),
            ModelSize::Reduced => ModelConfig::reduced(),
        };
        c.seed = seed;
        if let Some(b) = self.batch_norm {
            c.batch_norm = b == Switch::On;
        }
        c.lr_start = self.lr_start.unwrap_or(c.lr_start);
        c.lr_end = self.lr_end.unwrap_or(c.lr_end);
        c.max_epochs = self.max_epochs.unwrap_or(c.max_epochs);
        c.patience = self.patience.unwrap_or(c.patience);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.init_fan_in_scaled |= self.fan_in_init;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 3)]
    pub per_group: usize,
    #[arg(long, default_value_t = 180)]
    pub days: usize,
    /// Seconds between raw readings.
    #[arg(long, default_value_t = 3600)]
    pub interval: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RawFormat {
    /// `unix_ts,value`
    Plain,
    /// `Unix,Aggregate` columns of the cleaned REFIT export.
    Refit,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    /// Directory holding metadata.csv, schema.txt, links.csv, energy/ and weather/.
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long, value_enum, default_value = "plain")]
    pub energy_format: RawFormat,
    /// Minimum share of expected readings for a day to count.
    #[arg(long, default_value_t = 0.9)]
    pub coverage: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    /// Description table to cluster instead of the store's.
    #[arg(long, requires = "schema")]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub rule: RuleOpts,
    #[arg(long, default_value = "onehot", value_parser = parse_encoding)]
    pub encoding: Encoding,
    /// Key-value description of the target building.
    #[arg(long)]
    pub target: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub rule: RuleOpts,
    #[arg(long, default_value = "onehot", value_parser = parse_encoding)]
    pub encoding: Encoding,
    /// Train on these buildings (comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "target", required_unless_present = "target")]
    pub ids: Vec<String>,
    /// Select sources for this key-value description, then train on them.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_parser = parse_range)]
    pub train_range: Option<DateRange>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalMatrixArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[arg(long, value_parser = parse_range)]
    pub train_range: Option<DateRange>,
    #[arg(long, value_parser = parse_range)]
    pub test_range: Option<DateRange>,
    /// Min-max scale the error matrix to [0, 1].
    #[arg(long)]
    pub scale_matrix: bool,
    /// Report errors in kWh instead of the normalized scale.
    #[arg(long)]
    pub raw_errors: bool,
    #[arg(long, default_value_t = 30)]
    pub min_train_windows: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub store: StoreArg,
    #[command(flatten)]
    pub model: ModelOpts,
    #[arg(long, default_value = "onehot", value_parser = parse_encoding)]
    pub encoding: Encoding,
    #[arg(long, value_parser = parse_range)]
    pub train_range: Option<DateRange>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn parse_linkage(s: &str) -> std::result::Result<LinkageMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_encoding(s: &str) -> std::result::Result<Encoding, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses an inclusive `YYYY-MM-DD..YYYY-MM-DD` range.
pub fn parse_range(s: &str) -> std::result::Result<DateRange, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected START..END, got `{s}`"))?;
    let date = |x: &str| {
        NaiveDate::parse_from_str(x.trim(), "%Y-%m-%d").map_err(|e| format!("bad date `{x}`: {e}"))
    };
    DateRange::new(date(a)?, date(b)?).map_err(|e| e.to_string())
}

fn range_text(r: Option<DateRange>) -> String {
    r.map_or_else(|| "all".to_string(), |r| format!("{}..{}", r.start, r.end))
}

/// Comment lines shared by every output table.
#[derive(Debug, Clone)]
pub struct Provenance {
    lines: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Provenance {
            lines: vec![
                format!("crossgrid {} {command}", env!("CARGO_PKG_VERSION")),
                format!("seed: {seed}"),
                format!("config: {}", serde_json::to_string(config)?),
            ],
        })
    }

    pub fn input(&mut self, name: &str, digest: &str) {
        self.lines.push(format!("input {name}: sha256={digest}"));
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Prefixes `body` with the provenance as `#` comments.
    pub fn table(&self, body: &str) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str("# ");
            s.push_str(l);
            s.push('\n');
        }
        s.push_str(body);
        s
    }

    fn svg(&self, title: &str, timestamp: bool) -> SvgOptions {
        SvgOptions {
            title: Some(title.to_string()),
            notes: self.lines.clone(),
            timestamp,
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(checkpoint::digest(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Digests of the store's description files and every linked series, keyed
/// by path relative to the store root.
pub fn store_digests(cat: &StoreCatalog) -> Result<Vec<(String, String)>> {
    let mut files: BTreeSet<String> = ["schema.txt", "descriptions.csv", "links.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in cat.links() {
        files.insert(format!("energy/{}.csv", l.series_id));
        files.insert(format!("weather/{}.csv", l.station_id));
    }
    files
        .into_iter()
        .map(|f| Ok((f.clone(), file_digest(&cat.root().join(&f))?)))
        .collect()
}

fn add_store_inputs(p: &mut Provenance, cat: &StoreCatalog) -> Result<()> {
    for (f, d) in store_digests(cat)? {
        p.input(&f, &d);
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn open_store(s: &StoreArg) -> Result<StoreCatalog> {
    StoreCatalog::open(&s.store)
}

/// Parses arguments and runs one subcommand. Returns the process exit code:
/// 0 on success, 1 when the command failed, 2 on a usage error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Ingest(a) => ingest(&a).map(|_| ()),
        Command::Cluster(a) => cluster(&a).map(|_| ()),
        Command::Select(a) => select(&a).map(|_| ()),
        Command::Train(a) => train_cmd(&a).map(|_| ()),
        Command::EvalMatrix(a) => eval_matrix(&a).map(|_| ()),
        Command::Serve(a) => {
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| Error::invalid(format!("cannot install interrupt handler: {e}")))?;
            serve(&a, &stop)
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let fleet = SyntheticFleet::generate(&FleetConfig {
        seed: a.common.seed,
        groups: a.groups,
        per_group: a.per_group,
        days: a.days,
        ..FleetConfig::default()
    })?;
    fleet.write_raw(&a.common.out, a.interval)?;
    println!(
        "wrote {} buildings x {} days to {}",
        fleet.buildings.len(),
        fleet.days,
        a.common.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub building_id: String,
    pub days: usize,
    pub valid_days: usize,
    pub windows: usize,
}

pub fn ingest(a: &IngestArgs) -> Result<Vec<IngestSummary>> {
    let raw = &a.raw;
    let schema = Schema::load(&raw.join("schema.txt"))?;
    let table = load_descriptions(&raw.join("metadata.csv"), &schema, &LoadOptions::default())?;
    if table.warnings > 0 {
        log::warn!("{} metadata cells could not be parsed and are missing", table.warnings);
    }
    let links_path = raw.join("links.csv");
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(&links_path)
        .map_err(|e| Error::io(&links_path, std::io::Error::other(e.to_string())))?;
    let mut links = Vec::new();
    for (i, rec) in rdr.deserialize::<Link>().enumerate() {
        links.push(rec.map_err(|e| Error::Format {
            path: links_path.clone(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    let coverage = Coverage {
        threshold: a.coverage,
        ..Coverage::default()
    };
    let energy_cols = match a.energy_format {
        RawFormat::Plain => ColumnMap::load(),
        RawFormat::Refit => ColumnMap::refit(),
    };

    let mut cat = StoreCatalog::create(&a.store.store, schema)?;
    let mut prov = Provenance::new("ingest", a.common.seed, &(a.coverage, format!("{:?}", a.energy_format)))?;
    prov.input("metadata.csv", &file_digest(&raw.join("metadata.csv"))?);
    prov.input("links.csv", &file_digest(&links_path)?);

    let stations: BTreeSet<&str> = links.iter().map(|l| l.station_id.as_str()).collect();
    for st in stations {
        let path = raw.join("weather").join(format!("{st}.csv"));
        let (channels, report) = load_raw_channels(&path, st, "", &ColumnMap::weather())?;
        let daily: Vec<DailySeries> = channels
            .iter()
            .map(|c| resample_daily_mean(c, &coverage))
            .collect::<Result<_>>()?;
        let daily: [DailySeries; 3] = daily.try_into().map_err(|_| Error::invalid("expected 3 weather channels"))?;
        cat.put_weather(st, &daily)?;
        prov.input(&format!("weather/{st}.csv"), &file_digest(&path)?);
        log::info!("station {st}: {} rows", report.rows_read);
    }
    let mut summary = Vec::new();
    for l in &links {
        let desc = table
            .get(&l.building_id)
            .cloned()
            .ok_or_else(|| Error::Store(format!("link for building `{}` without metadata", l.building_id)))?;
        let path = raw.join("energy").join(format!("{}.csv", l.series_id));
        let (series, report) = load_raw(&path, &l.series_id, "W", &energy_cols)?;
        if report.duplicates_dropped > 0 {
            log::warn!("{}: {} repeated timestamps, last value kept", l.series_id, report.duplicates_dropped);
        }
        let daily = resample_daily_sum(&series, &coverage)?;
        cat.put_energy(&l.series_id, &daily)?;
        cat.put_building(desc, l.clone())?;
        prov.input(&format!("energy/{}.csv", l.series_id), &file_digest(&path)?);
        let b = cat.building_series(&l.building_id)?;
        let windows = NormalizationStats::fit(&[&b], None)
            .map(|st| build_windows(&b, &st, None).len())
            .unwrap_or(0);
        summary.push(IngestSummary {
            building_id: l.building_id.clone(),
            days: daily.len(),
            valid_days: daily.valid_days(),
            windows,
        });
    }
    let mut body = String::from("building_id,days,valid_days,windows\n");
    println!("{:>12} {:>6} {:>6} {:>8}", "building", "days", "valid", "windows");
    for s in &summary {
        body.push_str(&format!("{},{},{},{}\n", s.building_id, s.days, s.valid_days, s.windows));
        println!("{:>12} {:>6} {:>6} {:>8}", s.building_id, s.days, s.valid_days, s.windows);
    }
    write_out(&a.common.out, "ingest.csv", &prov.table(&body))?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct ClusterSnapshot<'a> {
    linkage: String,
    cut_fraction: f64,
    encoding: &'a str,
}

pub fn cluster(a: &ClusterArgs) -> Result<crate::similarity::ClusterAssignment> {
    let opts = &a.cluster;
    let mut prov = Provenance::new(
        "cluster",
        a.common.seed,
        &ClusterSnapshot {
            linkage: opts.linkage.to_string(),
            cut_fraction: opts.cut_fraction,
            encoding: opts.encoding.tag(),
        },
    )?;
    let table: DescriptionTable = match (&a.metadata, &a.schema) {
        (Some(m), Some(s)) => {
            prov.input("metadata", &file_digest(m)?);
            prov.input("schema", &file_digest(s)?);
            load_descriptions(m, &Schema::load(s)?, &LoadOptions::default())?
        }
        _ => {
            let cat = open_store(&a.store)?;
            add_store_inputs(&mut prov, &cat)?;
            cat.descriptions().clone()
        }
    };
    let (tree, clusters) = description_clusters(&table, opts.encoding, opts.linkage, opts.cut_fraction)?;
    let mut body = String::from("building_id,cluster\n");
    for (id, l) in clusters.ids.iter().zip(&clusters.labels) {
        body.push_str(&format!("{id},{l}\n"));
    }
    let out = &a.common.out;
    write_out(out, "clusters.csv", &prov.table(&body))?;
    write_out(out, "linkage.csv", &prov.table(&tree.to_text()))?;
    let cut = opts.cut_fraction * tree.max_height();
    write_out(
        out,
        "dendrogram.svg",
        &svg::dendrogram(&tree, Some(cut), &prov.svg("description dendrogram", a.common.svg_timestamp)),
    )?;
    for (i, g) in clusters.groups().iter().enumerate() {
        println!("cluster {i}: {}", g.join(" "));
    }
    Ok(clusters)
}

fn target_description(cat: &StoreCatalog, doc: &str) -> Result<BuildingDescription> {
    BuildingDescription::parse_kv("target", doc, cat.schema(), true)
}

pub fn select(a: &SelectArgs) -> Result<crate::selection::SelectionResult> {
    let cat = open_store(&a.store)?;
    let rule = a.rule.rule();
    let mut prov = Provenance::new(
        "select",
        a.common.seed,
        &serde_json::json!({ "rule": rule.to_string(), "encoding": a.encoding.tag(), "target": a.target }),
    )?;
    add_store_inputs(&mut prov, &cat)?;
    let target = target_description(&cat, &a.target)?;
    let sel = select_sources(&target, cat.descriptions(), rule, a.encoding)?;
    write_out(&a.common.out, "selection.csv", &prov.table(&sel.to_csv()))?;
    for (i, (id, d)) in sel.ranked.iter().enumerate() {
        println!("{:>3}  {id:<12} {d:.6}", i + 1);
    }
    Ok(sel)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sources: Vec<String>,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub epochs: usize,
}

pub fn train_cmd(a: &TrainArgs) -> Result<TrainOutcome> {
    let cat = open_store(&a.store)?;
    let cfg = a.model.config(a.common.seed)?;
    let mut prov = Provenance::new("train", a.common.seed, &cfg)?;
    add_store_inputs(&mut prov, &cat)?;
    let ids = match &a.target {
        Some(doc) => {
            let sel = select_sources(&target_description(&cat, doc)?, cat.descriptions(), a.rule.rule(), a.encoding)?;
            prov.note(format!("target: {doc}"));
            prov.note(format!("rule: {}", sel.rule));
            sel.ids()
        }
        None => a.ids.clone(),
    };
    prov.note(format!("train range: {}", range_text(a.train_range)));
    let assembled = assemble_ids(&ids, &cat, a.train_range)?;
    for w in assembled.warnings() {
        log::warn!("{w}");
        prov.note(w);
    }
    let sources = assembled.dataset.source_ids();
    prov.note(format!("sources: {}", sources.join(" ")));
    let (model, hist) = train(ForecastModel::init(&cfg)?, &assembled.dataset)?;
    let out = &a.common.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("checkpoint.json");
    let digest = checkpoint::save(&model, &path)?;
    prov.note(format!("checkpoint: sha256={digest}"));
    prov.note(format!("stop: {:?} after {} epochs, best epoch {}", hist.stop_reason, hist.epochs(), hist.best_epoch));
    write_out(out, "history.csv", &prov.table(&hist.to_csv()))?;
    println!("trained on {} ({} windows)", sources.join(", "), assembled.dataset.len());
    println!("{} epochs, best mse {:.6e}", hist.epochs(), hist.best_loss);
    println!("checkpoint {} sha256={digest}", path.display());
    Ok(TrainOutcome {
        sources,
        checkpoint: path,
        digest,
        epochs: hist.epochs(),
    })
}

/// Train and test ranges when not given: the first two thirds of the
/// fleet's overall span for training, the rest for testing.
fn default_ranges(fleet: &[BuildingSeries]) -> Result<(DateRange, DateRange)> {
    let start = fleet.iter().map(|b| b.energy.start).min().ok_or_else(|| Error::invalid("store has no buildings"))?;
    let end = fleet.iter().map(|b| b.energy.end()).max().ok_or_else(|| Error::invalid("store has no buildings"))?;
    let days = (end - start).num_days() as u64 + 1;
    let train_days = days * 2 / 3;
    if train_days == 0 || train_days >= days {
        return Err(Error::invalid("fleet span too short to split"));
    }
    let split = start + Days::new(train_days);
    Ok((
        DateRange::new(start, split - Days::new(1))?,
        DateRange::new(split, end)?,
    ))
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub matrix: crate::evaluation::TransferMatrix,
    pub agreement: f64,
    pub description_clusters: crate::similarity::ClusterAssignment,
    pub error_clusters: crate::similarity::ClusterAssignment,
}

pub fn eval_matrix(a: &EvalMatrixArgs) -> Result<EvalOutcome> {
    let cat = open_store(&a.store)?;
    let ids: Vec<String> = cat.links().map(|l| l.building_id.clone()).collect();
    let fleet: Vec<BuildingSeries> = ids.iter().map(|id| cat.building_series(id)).collect::<Result<_>>()?;
    let (dtrain, dtest) = default_ranges(&fleet)?;
    let train_range = a.train_range.unwrap_or(dtrain);
    let test_range = a.test_range.unwrap_or(dtest);
    let cfg = EvalConfig {
        model: a.model.config(a.common.seed)?,
        min_train_windows: a.min_train_windows,
        scale_matrix: a.scale_matrix,
        error_scale: if a.raw_errors { ErrorScale::Raw } else { ErrorScale::Normalized },
    };
    let opts = &a.cluster;
    let mut prov = Provenance::new(
        "eval-matrix",
        a.common.seed,
        &serde_json::json!({
            "eval": cfg,
            "linkage": opts.linkage.to_string(),
            "cut_fraction": opts.cut_fraction,
            "encoding": opts.encoding.tag(),
            "train_range": range_text(Some(train_range)),
            "test_range": range_text(Some(test_range)),
        }),
    )?;
    add_store_inputs(&mut prov, &cat)?;

    let models = train_fleet(&fleet, Some(train_range), &cfg)?;
    let matrix = transfer_matrix(&models, &fleet, Some(test_range), cfg.error_scale, cfg.scale_matrix)?;
    let (etree, eclusters) = error_matrix_clusters(&matrix, opts.linkage, opts.cut_fraction)?;
    let mut kept = cat.descriptions().clone();
    kept.rows.retain(|r| matrix.ids.contains(&r.building_id));
    let (dtree, dclusters) = description_clusters(&kept, opts.encoding, opts.linkage, opts.cut_fraction)?;
    let agreement = clustering_agreement(&dclusters, &eclusters)?;

    let out = &a.common.out;
    write_out(out, "matrix.csv", &matrix.to_csv(prov.lines()))?;
    let mut body = String::from("building_id,description_cluster,error_cluster\n");
    for id in &matrix.ids {
        body.push_str(&format!(
            "{id},{},{}\n",
            dclusters.label_of(id).expect("kept id"),
            eclusters.label_of(id).expect("matrix id")
        ));
    }
    let mut p = prov.clone();
    p.note(format!("rand index: {agreement}"));
    write_out(out, "clusters.csv", &p.table(&body))?;
    write_out(
        out,
        "agreement.csv",
        &prov.table(&format!(
            "rand_index,description_clusters,error_clusters\n{agreement},{},{}\n",
            dclusters.n_clusters(),
            eclusters.n_clusters()
        )),
    )?;
    let ts = a.common.svg_timestamp;
    write_out(out, "heatmap.svg", &svg::heatmap(&matrix.ids, &matrix.ids, &matrix.values, &prov.svg("test error (row: trained on, column: tested on)", ts)))?;
    write_out(
        out,
        "dendrogram_errors.svg",
        &svg::dendrogram(&etree, Some(opts.cut_fraction * etree.max_height()), &prov.svg("error dendrogram", ts)),
    )?;
    write_out(
        out,
        "dendrogram_descriptions.svg",
        &svg::dendrogram(&dtree, Some(opts.cut_fraction * dtree.max_height()), &prov.svg("description dendrogram", ts)),
    )?;
    for (id, why) in &matrix.excluded {
        println!("excluded {id}: {why}");
    }
    println!("{}x{} matrix, rand index {agreement:.3}", matrix.ids.len(), matrix.ids.len());
    Ok(EvalOutcome {
        matrix,
        agreement,
        description_clusters: dclusters,
        error_clusters: eclusters,
    })
}

/// Serves the workflow over HTTP until `stop` is set, then shuts it down
/// (in-flight requests fail with reason `shutdown`) and writes the message
/// log to `<out>/messages.ndjson`.
pub fn serve(a: &ServeArgs, stop: &AtomicBool) -> Result<()> {
    let cat = open_store(&a.store)?;
    let cfg = WorkflowConfig {
        model: a.model.config(a.common.seed)?,
        encoding: a.encoding,
        train_range: a.train_range,
        ..WorkflowConfig::default()
    };
    let wf = Arc::new(Workflow::start(cat, cfg)?);
    let server = HttpServer::bind(&a.addr, Arc::clone(&wf))?;
    if let Some(addr) = server.local_addr() {
        eprintln!("listening on http://{addr}");
    }
    let served = server.serve_until(stop);
    wf.shutdown();
    fs::create_dir_all(&a.common.out).map_err(|e| Error::io(&a.common.out, e))?;
    write_log(&wf.log(), &a.common.out.join("messages.ndjson"))?;
    served
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse_inclusively() {
        let r = parse_range("2014-04-01..2014-04-30").unwrap();
        assert_eq!(r.days(), 30);
        assert!(parse_range("2014-04-30..2014-04-01").is_err());
        assert!(parse_range("2014-04-01").is_err());
    }

    #[test]
    fn model_flags_override_the_base_config() {
        let cli = Cli::try_parse_from([
            "crossgrid", "train", "--ids", "1,2", "--model-size", "reduced", "--batch-norm", "off",
            "--lr-start", "0.01", "--max-epochs", "50", "--patience", "5", "--seed", "9",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(t.ids, ["1", "2"]);
        let c = t.model.config(t.common.seed).unwrap();
        assert_eq!((c.lstm_sizes[0], c.batch_norm, c.lr_start, c.max_epochs, c.patience, c.seed), (32, false, 0.01, 50, 5, 9));
        assert_eq!(c.lr_end, ModelConfig::reduced().lr_end);
    }

    #[test]
    fn rule_flags_pick_the_rule() {
        let r = RuleOpts { k: None, threshold: None };
        assert_eq!(r.rule(), SelectionRule::default());
        assert_eq!(RuleOpts { k: Some(2), threshold: None }.rule(), SelectionRule::TopK(2));
        assert!(Cli::try_parse_from(["crossgrid", "select", "--target", "x=1", "--k", "2", "--threshold", "1"]).is_err());
    }

    #[test]
    fn provenance_prefixes_comment_lines() {
        let mut p = Provenance::new("cluster", 3, &serde_json::json!({"a": 1})).unwrap();
        p.input("m.csv", "abc");
        let t = p.table("x,y\n");
        assert!(t.starts_with("# crossgrid "));
        assert!(t.contains("# seed: 3\n# config: {\"a\":1}\n# input m.csv: sha256=abc\nx,y\n"));
    }
}

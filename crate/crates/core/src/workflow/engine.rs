use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::bus::{Bus, Envelope, LogEvent, LogRecord, MemoryBus, MessageKind, Service};
use super::store::StoreCatalog;
use crate::error::{Error, Result};
use crate::metadata::{BuildingDescription, Encoding};
use crate::model::checkpoint::digest;
use crate::model::{predict_week, train_cancellable, ForecastModel, ModelConfig};
use crate::selection::{assemble_ids, select_sources, SelectionResult, SelectionRule};
use crate::timeseries::{BuildingSeries, DailySeries, DateRange, WEEK, WINDOW_SPAN};

pub const FORECAST_HORIZON: usize = WEEK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestState {
    Received,
    Selected,
    DataLoaded,
    Trained,
    Completed,
    Failed,
}

impl RequestState {
    fn rank(self) -> u8 {
        self as u8
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RequestState::Completed | RequestState::Failed)
    }

    /// Forward by one step, or to failed from any non-terminal state.
    pub fn can_move_to(self, next: RequestState) -> bool {
        !self.is_terminal()
            && (next == RequestState::Failed || next.rank() == self.rank() + 1)
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestState::Received => "received",
            RequestState::Selected => "selected",
            RequestState::DataLoaded => "data-loaded",
            RequestState::Trained => "trained",
            RequestState::Completed => "completed",
            RequestState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    /// First forecast day; values cover `FORECAST_HORIZON` consecutive days.
    pub start: NaiveDate,
    pub values: Vec<f64>,
    pub unit: String,
    /// Buildings whose data trained the model.
    pub sources: Vec<String>,
    pub model_key: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: String,
    pub description: String,
    pub rule: SelectionRule,
    pub state: RequestState,
    /// Unix milliseconds at which each state was entered.
    pub transitions: Vec<(RequestState, u64)>,
    pub selection: Option<SelectionResult>,
    pub forecast: Option<Forecast>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub model: ModelConfig,
    pub encoding: Encoding,
    pub train_range: Option<DateRange>,
    /// Deliveries per message before a Failure is published.
    pub max_attempts: u32,
    /// Reuse models trained for an identical (description, rule, config).
    pub use_cache: bool,
    pub faults: FaultPlan,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            model: ModelConfig::default(),
            encoding: Encoding::OneHot,
            train_range: None,
            max_attempts: 3,
            use_cache: true,
            faults: FaultPlan::default(),
        }
    }
}

/// Injected handler failures: the first `n` deliveries to a service fail,
/// optionally only for one request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub rules: Vec<(Service, Option<String>, u32)>,
}

impl FaultPlan {
    pub fn fail(mut self, service: Service, times: u32) -> Self {
        self.rules.push((service, None, times));
        self
    }

    pub fn fail_request(mut self, service: Service, request_id: &str, times: u32) -> Self {
        self.rules.push((service, Some(request_id.to_string()), times));
        self
    }

    fn take(&mut self, service: Service, request_id: &str) -> bool {
        let hit = self
            .rules
            .iter_mut()
            .filter(|(s, r, n)| *s == service && *n > 0 && r.as_deref().is_none_or(|r| r == request_id))
            // request-specific rules first
            .max_by_key(|(_, r, _)| r.is_some());
        match hit {
            Some((_, _, n)) => {
                *n -= 1;
                true
            }
            None => false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectionRequestPayload {
    description: String,
    rule: SelectionRule,
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectionResultPayload {
    description: String,
    selection: SelectionResult,
}

#[derive(Debug, Serialize, Deserialize)]
struct IdsPayload {
    building_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesResponsePayload {
    series: Vec<(String, DailySeries)>,
    missing: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeatherResponsePayload {
    station_of: BTreeMap<String, String>,
    stations: BTreeMap<String, [DailySeries; 3]>,
    missing: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelPayload {
    model_key: String,
    sources: Vec<String>,
    from_cache: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Default)]
struct Requests {
    map: Mutex<BTreeMap<String, RequestRecord>>,
    changed: Condvar,
}

impl Requests {
    /// Compare-and-set on state; `update` runs only when the move is legal.
    fn advance(&self, id: &str, to: RequestState, update: impl FnOnce(&mut RequestRecord)) -> bool {
        let mut map = self.map.lock().expect("request lock");
        let Some(r) = map.get_mut(id) else { return false };
        if !r.state.can_move_to(to) {
            return false;
        }
        r.state = to;
        r.transitions.push((to, now_ms()));
        update(r);
        self.changed.notify_all();
        true
    }

    /// Moves to failed and publishes the `Failure` message in one step.
    fn settle_failed(&self, bus: &dyn Bus, id: &str, reason: &str, mut payload: serde_json::Value) -> bool {
        payload["reason"] = json!(reason);
        self.advance(id, RequestState::Failed, |r| {
            bus.publish(id, MessageKind::Failure, payload);
            r.failure = Some(reason.to_string());
        })
    }

    fn state(&self, id: &str) -> Option<RequestState> {
        self.map.lock().expect("request lock").get(id).map(|r| r.state)
    }
}

#[derive(Clone)]
struct CachedModel {
    model: Arc<ForecastModel>,
    sources: Vec<String>,
}

struct Ctx {
    bus: Arc<dyn Bus>,
    catalog: Arc<StoreCatalog>,
    cfg: WorkflowConfig,
    requests: Requests,
    faults: Mutex<FaultPlan>,
    stop: AtomicBool,
    trainings: AtomicUsize,
    next_request: AtomicU64,
    cache: Mutex<HashMap<String, CachedModel>>,
}

/// A running pipeline: four service threads over one bus.
pub struct Workflow {
    ctx: Arc<Ctx>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Workflow {
    pub fn start(catalog: StoreCatalog, cfg: WorkflowConfig) -> Result<Self> {
        Self::start_with_bus(catalog, Arc::new(MemoryBus::new()), cfg)
    }

    pub fn start_with_bus(catalog: StoreCatalog, bus: Arc<dyn Bus>, cfg: WorkflowConfig) -> Result<Self> {
        cfg.model.validate()?;
        if cfg.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be at least 1"));
        }
        if catalog.descriptions().is_empty() {
            return Err(Error::Store("contextual store holds no buildings".into()));
        }
        catalog.validate()?;
        let ctx = Arc::new(Ctx {
            bus,
            catalog: Arc::new(catalog),
            faults: Mutex::new(cfg.faults.clone()),
            cfg,
            requests: Requests::default(),
            stop: AtomicBool::new(false),
            trainings: AtomicUsize::new(0),
            next_request: AtomicU64::new(1),
            cache: Mutex::new(HashMap::new()),
        });
        let threads = Service::ALL
            .into_iter()
            .map(|svc| {
                let ctx = Arc::clone(&ctx);
                std::thread::Builder::new()
                    .name(format!("svc-{svc}"))
                    .spawn(move || run_service(ctx, svc))
                    .expect("spawn service thread")
            })
            .collect();
        Ok(Workflow {
            ctx,
            threads: Mutex::new(threads),
        })
    }

    /// Validates the description against the store schema and publishes a
    /// SelectionRequest. Returns without waiting for the pipeline.
    pub fn submit(&self, description: &str, horizon: usize, rule: SelectionRule) -> Result<String> {
        let id = format!("req-{:06}", self.ctx.next_request.fetch_add(1, Ordering::SeqCst));
        self.submit_as(&id, description, horizon, rule)?;
        Ok(id)
    }

    fn submit_as(&self, id: &str, description: &str, horizon: usize, rule: SelectionRule) -> Result<()> {
        if self.ctx.stop.load(Ordering::SeqCst) {
            return Err(Error::invalid("workflow is shut down"));
        }
        if horizon != FORECAST_HORIZON {
            return Err(Error::invalid(format!("horizon must be {FORECAST_HORIZON} days, got {horizon}")));
        }
        if let SelectionRule::TopK(0) = rule {
            return Err(Error::invalid("k must be positive"));
        }
        BuildingDescription::parse_kv("target", description, self.ctx.catalog.schema(), true)?;
        {
            let mut map = self.ctx.requests.map.lock().expect("request lock");
            if map.contains_key(id) {
                return Err(Error::invalid(format!("request `{id}` already exists")));
            }
            map.insert(
                id.to_string(),
                RequestRecord {
                    request_id: id.to_string(),
                    description: description.to_string(),
                    rule,
                    state: RequestState::Received,
                    transitions: vec![(RequestState::Received, now_ms())],
                    selection: None,
                    forecast: None,
                    failure: None,
                },
            );
        }
        let payload = SelectionRequestPayload {
            description: description.to_string(),
            rule,
        };
        self.ctx
            .bus
            .publish(id, MessageKind::SelectionRequest, serde_json::to_value(payload)?);
        Ok(())
    }

    pub fn poll(&self, request_id: &str) -> Result<RequestRecord> {
        self.ctx
            .requests
            .map
            .lock()
            .expect("request lock")
            .get(request_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("request `{request_id}`")))
    }

    /// Blocks until the request is terminal or `deadline` passes, then
    /// returns its record.
    pub fn wait(&self, request_id: &str, deadline: Duration) -> Result<RequestRecord> {
        let until = Instant::now() + deadline;
        let mut map = self.ctx.requests.map.lock().expect("request lock");
        loop {
            let r = map
                .get(request_id)
                .ok_or_else(|| Error::NotFound(format!("request `{request_id}`")))?;
            let left = until.saturating_duration_since(Instant::now());
            if r.state.is_terminal() || left.is_zero() {
                return Ok(r.clone());
            }
            map = self.ctx.requests.changed.wait_timeout(map, left).expect("request lock").0;
        }
    }

    /// Waits for every known request; returns all records.
    pub fn wait_all(&self, deadline: Duration) -> BTreeMap<String, RequestRecord> {
        let until = Instant::now() + deadline;
        let mut map = self.ctx.requests.map.lock().expect("request lock");
        loop {
            let left = until.saturating_duration_since(Instant::now());
            if map.values().all(|r| r.state.is_terminal()) || left.is_zero() {
                return map.clone();
            }
            map = self.ctx.requests.changed.wait_timeout(map, left).expect("request lock").0;
        }
    }

    pub fn records(&self) -> BTreeMap<String, RequestRecord> {
        self.ctx.requests.map.lock().expect("request lock").clone()
    }

    /// Number of models trained so far (cache hits excluded).
    pub fn training_runs(&self) -> usize {
        self.ctx.trainings.load(Ordering::SeqCst)
    }

    pub fn log(&self) -> Vec<LogRecord> {
        self.ctx.bus.log()
    }

    pub fn catalog(&self) -> &StoreCatalog {
        &self.ctx.catalog
    }

    /// Stops the services; requests still in flight become failed with
    /// reason `shutdown`.
    pub fn shutdown(&self) {
        self.ctx.stop.store(true, Ordering::SeqCst);
        let threads: Vec<JoinHandle<()>> = self.threads.lock().expect("thread lock").drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
        let open: Vec<String> = self
            .records()
            .into_values()
            .filter(|r| !r.state.is_terminal())
            .map(|r| r.request_id)
            .collect();
        for id in open {
            self.ctx.requests.settle_failed(&*self.ctx.bus, &id, "shutdown", json!({"stage": "shutdown"}));
        }
    }
}

impl Drop for Workflow {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run_service(ctx: Arc<Ctx>, svc: Service) {
    let mut handled: HashSet<(String, MessageKind)> = HashSet::new();
    let mut learner = Learner::default();
    while !ctx.stop.load(Ordering::SeqCst) {
        let Some(env) = ctx.bus.recv(svc, Duration::from_millis(20)) else {
            continue;
        };
        let key = (env.request_id.clone(), env.kind);
        if handled.contains(&key) {
            log::debug!("{svc}: dropping duplicate {} for {}", env.kind, env.request_id);
            continue;
        }
        if ctx.requests.state(&env.request_id).is_none_or(RequestState::is_terminal) {
            log::debug!("{svc}: ignoring {} for closed request {}", env.kind, env.request_id);
            continue;
        }
        let injected = ctx.faults.lock().expect("fault lock").take(svc, &env.request_id);
        let outcome = if injected {
            ctx.bus.record_fault(&env);
            Err(Error::Store(format!("injected fault in {svc}")))
        } else {
            match svc {
                Service::Selection => handle_selection(&ctx, &env),
                Service::BuildingData => handle_series(&ctx, &env),
                Service::WeatherData => handle_weather(&ctx, &env),
                Service::Learning => learner.handle(&ctx, &env),
            }
        };
        if ctx.stop.load(Ordering::SeqCst) {
            // shutdown settles whatever is still in flight
            break;
        }
        match outcome {
            Ok(()) => {
                handled.insert(key);
            }
            Err(e) if env.attempt < ctx.cfg.max_attempts => {
                log::warn!("{svc}: {} for {} failed (attempt {}): {e}", env.kind, env.request_id, env.attempt);
                ctx.bus.redeliver(&env);
            }
            Err(e) => {
                log::warn!("{svc}: {} for {} failed permanently: {e}", env.kind, env.request_id);
                handled.insert(key);
                learner.jobs.remove(&env.request_id);
                let reason = format!("{svc} failed on {}: {e}", env.kind);
                ctx.requests.settle_failed(
                    &*ctx.bus,
                    &env.request_id,
                    &reason,
                    json!({"stage": svc.to_string(), "kind": env.kind}),
                );
            }
        }
    }
}

fn handle_selection(ctx: &Ctx, env: &Envelope) -> Result<()> {
    let p: SelectionRequestPayload = serde_json::from_value(env.payload.clone())?;
    let target = BuildingDescription::parse_kv("target", &p.description, ctx.catalog.schema(), true)?;
    let selection = select_sources(&target, ctx.catalog.descriptions(), p.rule, ctx.cfg.encoding)?;
    let payload = serde_json::to_value(SelectionResultPayload {
        description: p.description,
        selection: selection.clone(),
    })?;
    if ctx
        .requests
        .advance(&env.request_id, RequestState::Selected, |r| r.selection = Some(selection))
    {
        ctx.bus.publish(&env.request_id, MessageKind::SelectionResult, payload);
    }
    Ok(())
}

fn handle_series(ctx: &Ctx, env: &Envelope) -> Result<()> {
    let p: IdsPayload = serde_json::from_value(env.payload.clone())?;
    let mut out = SeriesResponsePayload {
        series: Vec::new(),
        missing: Vec::new(),
    };
    for id in p.building_ids {
        let found = ctx
            .catalog
            .link(&id)
            .and_then(|l| ctx.catalog.energy(&l.series_id));
        match found {
            Ok(s) => out.series.push((id, s)),
            Err(Error::NotFound(what)) => out.missing.push((id, format!("{what} not found"))),
            Err(e) => return Err(e),
        }
    }
    ctx.bus
        .publish(&env.request_id, MessageKind::SeriesResponse, serde_json::to_value(out)?);
    Ok(())
}

fn handle_weather(ctx: &Ctx, env: &Envelope) -> Result<()> {
    let p: IdsPayload = serde_json::from_value(env.payload.clone())?;
    let mut out = WeatherResponsePayload {
        station_of: BTreeMap::new(),
        stations: BTreeMap::new(),
        missing: Vec::new(),
    };
    for id in p.building_ids {
        let station = match ctx.catalog.link(&id) {
            Ok(l) => l.station_id.clone(),
            Err(Error::NotFound(what)) => {
                out.missing.push((id, format!("{what} not found")));
                continue;
            }
            Err(e) => return Err(e),
        };
        if !out.stations.contains_key(&station) {
            match ctx.catalog.weather(&station) {
                Ok(w) => {
                    out.stations.insert(station.clone(), w);
                }
                Err(Error::NotFound(what)) => {
                    out.missing.push((id, format!("{what} not found")));
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
        out.station_of.insert(id, station);
    }
    ctx.bus
        .publish(&env.request_id, MessageKind::WeatherResponse, serde_json::to_value(out)?);
    Ok(())
}

struct Job {
    selection: SelectionResult,
    series: Option<SeriesResponsePayload>,
    weather: Option<WeatherResponsePayload>,
    buildings: BTreeMap<String, BuildingSeries>,
    model_key: String,
}

/// Learning service state, owned by its thread.
#[derive(Default)]
struct Learner {
    jobs: HashMap<String, Job>,
}

impl Learner {
    fn job(&mut self, id: &str) -> Result<&mut Job> {
        self.jobs
            .get_mut(id)
            .ok_or_else(|| Error::invalid(format!("no pending job for request `{id}`")))
    }

    fn handle(&mut self, ctx: &Ctx, env: &Envelope) -> Result<()> {
        let id = env.request_id.as_str();
        match env.kind {
            MessageKind::SelectionResult => {
                let p: SelectionResultPayload = serde_json::from_value(env.payload.clone())?;
                let model_key = model_key(ctx, &p.description, p.selection.rule)?;
                let ids = json!({ "building_ids": p.selection.ids() });
                self.jobs.insert(
                    id.to_string(),
                    Job {
                        selection: p.selection,
                        series: None,
                        weather: None,
                        buildings: BTreeMap::new(),
                        model_key,
                    },
                );
                ctx.bus.publish(id, MessageKind::SeriesRequest, ids.clone());
                ctx.bus.publish(id, MessageKind::WeatherRequest, ids);
                Ok(())
            }
            MessageKind::SeriesResponse => {
                let p: SeriesResponsePayload = serde_json::from_value(env.payload.clone())?;
                self.job(id)?.series = Some(p);
                self.maybe_loaded(ctx, id)
            }
            MessageKind::WeatherResponse => {
                let p: WeatherResponsePayload = serde_json::from_value(env.payload.clone())?;
                self.job(id)?.weather = Some(p);
                self.maybe_loaded(ctx, id)
            }
            MessageKind::TrainRequest => {
                let job = self.job(id)?;
                let key = job.model_key.clone();
                let cached = if ctx.cfg.use_cache {
                    ctx.cache.lock().expect("cache lock").get(&key).cloned()
                } else {
                    None
                };
                let (sources, from_cache) = match cached {
                    Some(c) => (c.sources, true),
                    None => {
                        let assembled = assemble_ids(&job.selection.ids(), &job.buildings, ctx.cfg.train_range)?;
                        for w in assembled.warnings() {
                            log::warn!("{id}: {w}");
                        }
                        let (model, hist) =
                            train_cancellable(ForecastModel::init(&ctx.cfg.model)?, &assembled.dataset, &ctx.stop)?;
                        ctx.trainings.fetch_add(1, Ordering::SeqCst);
                        log::info!("{id}: trained on {:?} for {} epochs", assembled.dataset.source_ids(), hist.epochs());
                        let sources = assembled.dataset.source_ids();
                        ctx.cache.lock().expect("cache lock").insert(
                            key.clone(),
                            CachedModel {
                                model: Arc::new(model),
                                sources: sources.clone(),
                            },
                        );
                        (sources, false)
                    }
                };
                let payload = serde_json::to_value(ModelPayload {
                    model_key: key,
                    sources,
                    from_cache,
                })?;
                if ctx.requests.advance(id, RequestState::Trained, |_| {}) {
                    ctx.bus.publish(id, MessageKind::ModelReady, payload);
                }
                Ok(())
            }
            MessageKind::ModelReady => {
                ctx.bus.publish(id, MessageKind::ForecastRequest, env.payload.clone());
                Ok(())
            }
            MessageKind::ForecastRequest => {
                let p: ModelPayload = serde_json::from_value(env.payload.clone())?;
                let cached = ctx
                    .cache
                    .lock()
                    .expect("cache lock")
                    .get(&p.model_key)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("model `{}`", p.model_key)))?;
                let job = self.job(id)?;
                let forecast = forecast(&cached, job, &p)?;
                // published under the request lock so waiters see the response in the log
                ctx.requests.advance(id, RequestState::Completed, |r| {
                    ctx.bus
                        .publish(id, MessageKind::ForecastResponse, json!({ "forecast": &forecast }));
                    r.forecast = Some(forecast.clone());
                });
                self.jobs.remove(id);
                Ok(())
            }
            other => Err(Error::invalid(format!("learning service cannot handle {other}"))),
        }
    }

    fn maybe_loaded(&mut self, ctx: &Ctx, id: &str) -> Result<()> {
        let job = self.job(id)?;
        let (Some(series), Some(weather)) = (&job.series, &job.weather) else {
            return Ok(());
        };
        let mut buildings = BTreeMap::new();
        for (bid, energy) in &series.series {
            let Some(w) = weather.station_of.get(bid).and_then(|s| weather.stations.get(s)) else {
                log::warn!("{id}: building {bid} has no weather; left out");
                continue;
            };
            buildings.insert(
                bid.clone(),
                BuildingSeries {
                    building_id: bid.clone(),
                    energy: energy.clone(),
                    weather: w.clone(),
                },
            );
        }
        for (bid, why) in series.missing.iter().chain(&weather.missing) {
            log::warn!("{id}: building {bid}: {why}");
        }
        job.buildings = buildings;
        if ctx.requests.advance(id, RequestState::DataLoaded, |_| {}) {
            ctx.bus.publish(id, MessageKind::TrainRequest, json!({ "model_key": job.model_key }));
        }
        Ok(())
    }
}

fn model_key(ctx: &Ctx, description: &str, rule: SelectionRule) -> Result<String> {
    let schema = ctx.catalog.schema();
    let canonical = BuildingDescription::parse_kv("target", description, schema, true)?.to_kv(schema);
    let text = format!(
        "{canonical}\n{rule}\n{}\n{:?}\n{:?}",
        serde_json::to_string(&ctx.cfg.model)?,
        ctx.cfg.encoding,
        ctx.cfg.train_range
    );
    Ok(digest(text.as_bytes())[..16].to_string())
}

/// Forecasts the week after the latest 7-day span that every source covers
/// (energy and weather). The target has no history, so last week's
/// consumption is the mean over sources; weather comes from the nearest
/// source's station.
fn forecast(cached: &CachedModel, job: &Job, p: &ModelPayload) -> Result<Forecast> {
    let order: Vec<&BuildingSeries> = job
        .selection
        .ids()
        .iter()
        .filter(|id| cached.sources.contains(id))
        .filter_map(|id| job.buildings.get(id))
        .collect();
    let first = *order
        .first()
        .ok_or_else(|| Error::invalid("none of the model's sources has data"))?;
    let covered = |b: &BuildingSeries, end: NaiveDate| {
        (0..WINDOW_SPAN as u64).all(|k| {
            let d = end - Days::new(k);
            b.energy.get(d).is_some() && b.weather.iter().all(|w| w.get(d).is_some())
        })
    };
    let latest = order.iter().map(|b| b.energy.end()).min().expect("non-empty");
    let earliest = order.iter().map(|b| b.energy.start).max().expect("non-empty");
    let mut end = Some(latest);
    let mut chosen: Option<(NaiveDate, Vec<&BuildingSeries>)> = None;
    while let Some(e) = end.filter(|e| *e >= earliest) {
        if order.iter().all(|b| covered(b, e)) {
            chosen = Some((e, order.clone()));
            break;
        }
        end = e.pred_opt();
    }
    if chosen.is_none() {
        // fall back to the nearest source alone
        let mut e = first.energy.end();
        while e >= first.energy.start {
            if covered(first, e) {
                chosen = Some((e, vec![first]));
                break;
            }
            e = e.pred_opt().expect("date in range");
        }
    }
    let (end, used) = chosen.ok_or_else(|| Error::invalid("no source has 14 consecutive complete days"))?;
    let span_start = end - Days::new(WINDOW_SPAN as u64 - 1);
    let day = |k: usize| span_start + Days::new(k as u64);
    let mut last_week = [0.0; WEEK];
    let mut cur = [[0.0; 3]; WEEK];
    let mut next = [[0.0; 3]; WEEK];
    for t in 0..WEEK {
        last_week[t] = used.iter().map(|b| b.energy.get(day(t)).expect("covered")).sum::<f64>() / used.len() as f64;
        for c in 0..3 {
            cur[t][c] = used[0].weather[c].get(day(t)).expect("covered");
            next[t][c] = used[0].weather[c].get(day(t + WEEK)).expect("covered");
        }
    }
    let values = predict_week(&cached.model, &last_week, &next, &cur)?;
    Ok(Forecast {
        start: day(WEEK),
        values: values.to_vec(),
        unit: first.energy.unit.clone(),
        sources: cached.sources.clone(),
        model_key: p.model_key.clone(),
        from_cache: p.from_cache,
    })
}

/// Terminal (or latest) state per request, derived from the log alone.
pub fn states_from_log(log: &[LogRecord]) -> BTreeMap<String, RequestState> {
    let mut out = BTreeMap::new();
    for r in log.iter().filter(|r| r.event == LogEvent::Publish) {
        let e = &r.envelope;
        let state = match e.kind {
            MessageKind::SelectionRequest => RequestState::Received,
            MessageKind::SelectionResult => RequestState::Selected,
            MessageKind::TrainRequest => RequestState::DataLoaded,
            MessageKind::ModelReady => RequestState::Trained,
            MessageKind::ForecastResponse => RequestState::Completed,
            MessageKind::Failure => RequestState::Failed,
            _ => continue,
        };
        out.insert(e.request_id.clone(), state);
    }
    out
}

/// Re-executes a logged run: resubmits every logged request under its
/// original id on a fresh pipeline, re-injecting the logged faults, and
/// returns the resulting records once all are terminal.
pub fn replay(
    log: &[LogRecord],
    catalog: StoreCatalog,
    mut cfg: WorkflowConfig,
    deadline: Duration,
) -> Result<BTreeMap<String, RequestRecord>> {
    let mut faults = FaultPlan::default();
    let mut counts: BTreeMap<(Service, String), u32> = BTreeMap::new();
    for r in log.iter().filter(|r| r.event == LogEvent::Fault) {
        if let Some(svc) = r.envelope.kind.route() {
            *counts.entry((svc, r.envelope.request_id.clone())).or_default() += 1;
        }
    }
    for ((svc, id), n) in counts {
        faults = faults.fail_request(svc, &id, n);
    }
    cfg.faults = faults;
    let wf = Workflow::start(catalog, cfg)?;
    for r in log {
        if r.event == LogEvent::Publish && r.envelope.kind == MessageKind::SelectionRequest {
            let p: SelectionRequestPayload = serde_json::from_value(r.envelope.payload.clone())?;
            wf.submit_as(&r.envelope.request_id, &p.description, FORECAST_HORIZON, p.rule)?;
        }
    }
    let out = wf.wait_all(deadline);
    wf.shutdown();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_follow_the_listed_order() {
        use RequestState::*;
        assert!(Received.can_move_to(Selected));
        assert!(!Received.can_move_to(DataLoaded));
        assert!(Trained.can_move_to(Completed));
        assert!(DataLoaded.can_move_to(Failed));
        assert!(!Completed.can_move_to(Failed));
        assert!(!Failed.can_move_to(Failed));
        assert!(!Selected.can_move_to(Received));
    }

    #[test]
    fn fault_plan_counts_down_and_prefers_request_rules() {
        let mut p = FaultPlan::default()
            .fail(Service::BuildingData, 1)
            .fail_request(Service::BuildingData, "r2", 1);
        assert!(p.take(Service::BuildingData, "r2"));
        assert!(p.take(Service::BuildingData, "r2"));
        assert!(!p.take(Service::BuildingData, "r2"));
        assert!(!p.take(Service::Selection, "r1"));
    }
}

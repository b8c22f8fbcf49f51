use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    SelectionRequest,
    SelectionResult,
    SeriesRequest,
    SeriesResponse,
    WeatherRequest,
    WeatherResponse,
    TrainRequest,
    ModelReady,
    ForecastRequest,
    ForecastResponse,
    Failure,
}

impl MessageKind {
    /// The service consuming this kind; `None` for terminal kinds.
    pub fn route(self) -> Option<Service> {
        use MessageKind::*;
        match self {
            SelectionRequest => Some(Service::Selection),
            SeriesRequest => Some(Service::BuildingData),
            WeatherRequest => Some(Service::WeatherData),
            SelectionResult | SeriesResponse | WeatherResponse | TrainRequest | ModelReady | ForecastRequest => {
                Some(Service::Learning)
            }
            ForecastResponse | Failure => None,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Service {
    Selection,
    BuildingData,
    WeatherData,
    Learning,
}

impl Service {
    pub const ALL: [Service; 4] = [Service::Selection, Service::BuildingData, Service::WeatherData, Service::Learning];
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Service::Selection => "selection",
            Service::BuildingData => "building-data",
            Service::WeatherData => "weather-data",
            Service::Learning => "learning",
        })
    }
}

impl FromStr for Service {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Service::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown service `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub message_id: u64,
    pub request_id: String,
    pub kind: MessageKind,
    pub payload: serde_json::Value,
    /// Delivery attempt, starting at 1.
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    /// First publication.
    Publish,
    /// Delivered once more after a failed attempt.
    Redeliver,
    /// Delivered a second time without a failure (at-least-once duplicate).
    Duplicate,
    /// A handler failed on this delivery because of an injected fault.
    Fault,
}

/// One line of the newline-delimited message log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub event: LogEvent,
    pub envelope: Envelope,
}

pub fn write_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Transport between services.
pub trait Bus: Send + Sync {
    /// Publishes a new message and returns its envelope.
    fn publish(&self, request_id: &str, kind: MessageKind, payload: serde_json::Value) -> Envelope;
    /// Puts a failed delivery back with its attempt counter raised.
    fn redeliver(&self, env: &Envelope) -> Envelope;
    /// Records that a delivery failed because of an injected fault.
    fn record_fault(&self, env: &Envelope);
    /// Next message for `service`, waiting at most `timeout`.
    fn recv(&self, service: Service, timeout: Duration) -> Option<Envelope>;
    fn log(&self) -> Vec<LogRecord>;
    /// Whether every service queue is empty.
    fn idle(&self) -> bool;
}

#[derive(Default)]
struct Queues {
    queues: HashMap<Service, VecDeque<Envelope>>,
    log: Vec<LogRecord>,
}

/// In-process bus: one FIFO queue per service.
pub struct MemoryBus {
    next_id: AtomicU64,
    state: Mutex<Queues>,
    ready: Condvar,
    duplicate: HashSet<MessageKind>,
}

impl Default for MemoryBus {
    fn default() -> Self {
        MemoryBus::new()
    }
}

impl MemoryBus {
    pub fn new() -> Self {
        MemoryBus {
            next_id: AtomicU64::new(1),
            state: Mutex::new(Queues::default()),
            ready: Condvar::new(),
            duplicate: HashSet::new(),
        }
    }

    /// Delivers every message of the given kinds twice.
    pub fn duplicating(kinds: impl IntoIterator<Item = MessageKind>) -> Self {
        MemoryBus {
            duplicate: kinds.into_iter().collect(),
            ..MemoryBus::new()
        }
    }

    fn push(&self, q: &mut Queues, event: LogEvent, env: Envelope) {
        let seq = q.log.len() as u64;
        q.log.push(LogRecord {
            seq,
            event,
            envelope: env.clone(),
        });
        if event == LogEvent::Fault {
            return;
        }
        if let Some(svc) = env.kind.route() {
            q.queues.entry(svc).or_default().push_back(env);
            self.ready.notify_all();
        }
    }
}

impl Bus for MemoryBus {
    fn publish(&self, request_id: &str, kind: MessageKind, payload: serde_json::Value) -> Envelope {
        let env = Envelope {
            message_id: self.next_id.fetch_add(1, Ordering::SeqCst),
            request_id: request_id.to_string(),
            kind,
            payload,
            attempt: 1,
        };
        let mut q = self.state.lock().expect("bus lock");
        self.push(&mut q, LogEvent::Publish, env.clone());
        if self.duplicate.contains(&kind) {
            self.push(&mut q, LogEvent::Duplicate, env.clone());
        }
        env
    }

    fn redeliver(&self, env: &Envelope) -> Envelope {
        let mut again = env.clone();
        again.attempt += 1;
        let mut q = self.state.lock().expect("bus lock");
        self.push(&mut q, LogEvent::Redeliver, again.clone());
        again
    }

    fn record_fault(&self, env: &Envelope) {
        let mut q = self.state.lock().expect("bus lock");
        self.push(&mut q, LogEvent::Fault, env.clone());
    }

    fn recv(&self, service: Service, timeout: Duration) -> Option<Envelope> {
        let mut q = self.state.lock().expect("bus lock");
        loop {
            if let Some(e) = q.queues.get_mut(&service).and_then(VecDeque::pop_front) {
                return Some(e);
            }
            let (guard, res) = self.ready.wait_timeout(q, timeout).expect("bus lock");
            q = guard;
            if res.timed_out() {
                return q.queues.get_mut(&service).and_then(VecDeque::pop_front);
            }
        }
    }

    fn log(&self) -> Vec<LogRecord> {
        self.state.lock().expect("bus lock").log.clone()
    }

    fn idle(&self) -> bool {
        self.state
            .lock()
            .expect("bus lock")
            .queues
            .values()
            .all(VecDeque::is_empty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_by_kind_and_logs_everything() {
        let bus = MemoryBus::new();
        let a = bus.publish("r1", MessageKind::SelectionRequest, serde_json::json!({"x": 1}));
        let b = bus.publish("r1", MessageKind::ForecastResponse, serde_json::json!(null));
        assert_ne!(a.message_id, b.message_id);
        assert_eq!(a.attempt, 1);
        let got = bus.recv(Service::Selection, Duration::from_millis(10)).unwrap();
        assert_eq!(got, a);
        assert!(bus.recv(Service::Learning, Duration::from_millis(1)).is_none());
        let again = bus.redeliver(&got);
        assert_eq!(again.attempt, 2);
        assert_eq!(again.message_id, a.message_id);
        assert_eq!(bus.log().len(), 3);
        assert!(!bus.idle());
    }

    #[test]
    fn duplicating_bus_delivers_twice() {
        let bus = MemoryBus::duplicating([MessageKind::SelectionResult]);
        let e = bus.publish("r", MessageKind::SelectionResult, serde_json::json!({}));
        let d = Duration::from_millis(1);
        assert_eq!(bus.recv(Service::Learning, d), Some(e.clone()));
        assert_eq!(bus.recv(Service::Learning, d), Some(e));
        assert!(bus.idle());
    }

    #[test]
    fn log_round_trips_as_ndjson() {
        let bus = MemoryBus::new();
        bus.publish("r", MessageKind::SeriesRequest, serde_json::json!({"building_ids": ["1"]}));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.ndjson");
        write_log(&bus.log(), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert_eq!(read_log(&p).unwrap(), bus.log());
    }
}

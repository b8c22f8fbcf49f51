mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossgrid::selection::SelectionRule;
use crossgrid::workflow::http::HttpServer;
use crossgrid::workflow::{
    replay, states_from_log, FaultPlan, LogEvent, MemoryBus, MessageKind, RequestState, Service, StoreCatalog,
    Workflow, WorkflowConfig,
};
use crossgrid::Error;

use common::*;

const DEADLINE: Duration = Duration::from_secs(120);

fn start(cfg: WorkflowConfig) -> (tempfile::TempDir, Workflow) {
    let dir = tempfile::tempdir().unwrap();
    let f = fleet(1, 3, 90);
    let wf = Workflow::start(store(dir.path(), &f), cfg).unwrap();
    (dir, wf)
}

fn count(wf: &Workflow, id: &str, kind: MessageKind) -> usize {
    wf.log()
        .iter()
        .filter(|r| r.event == LogEvent::Publish && r.envelope.request_id == id && r.envelope.kind == kind)
        .count()
}

#[test]
fn request_reaches_a_seven_day_forecast() {
    let (_dir, wf) = start(workflow_config(quick_model(0)));
    let id = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let early = wf.poll(&id).unwrap();
    assert!(matches!(early.state, RequestState::Received | RequestState::Selected | RequestState::DataLoaded | RequestState::Trained | RequestState::Completed));
    let r = wf.wait(&id, DEADLINE).unwrap();
    assert_eq!(r.state, RequestState::Completed, "{:?}", r.failure);
    let f = r.forecast.unwrap();
    assert_eq!(f.values.len(), 7);
    assert!(f.values.iter().all(|v| v.is_finite()));
    assert_eq!(f.sources.len(), 2);
    assert_eq!(r.selection.unwrap().ranked.len(), 2);
    let states: Vec<RequestState> = r.transitions.iter().map(|t| t.0).collect();
    use RequestState::*;
    assert_eq!(states, vec![Received, Selected, DataLoaded, Trained, Completed]);
    assert_eq!(count(&wf, &id, MessageKind::ModelReady), 1);
    assert_eq!(count(&wf, &id, MessageKind::ForecastResponse), 1);
    assert_eq!(wf.training_runs(), 1);
}

#[test]
fn submissions_are_validated() {
    let (_dir, wf) = start(workflow_config(quick_model(0)));
    let err = wf
        .submit(&format!("{GROUP_A_TARGET}, pool_count=1"), 7, SelectionRule::TopK(2))
        .unwrap_err();
    assert!(matches!(err, Error::Schema(_)));
    assert!(err.to_string().contains("pool_count"));
    assert!(wf.submit(GROUP_A_TARGET, 14, SelectionRule::TopK(2)).is_err());
    assert!(wf.submit("occupants", 7, SelectionRule::TopK(2)).is_err());
    assert!(matches!(wf.poll("req-999999"), Err(Error::NotFound(_))));
    let a = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let b = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn duplicate_delivery_trains_once() {
    let dir = tempfile::tempdir().unwrap();
    let f = fleet(1, 3, 90);
    let bus = Arc::new(MemoryBus::duplicating([
        MessageKind::SelectionResult,
        MessageKind::TrainRequest,
        MessageKind::SeriesRequest,
    ]));
    let cfg = WorkflowConfig {
        use_cache: false,
        ..workflow_config(quick_model(0))
    };
    let wf = Workflow::start_with_bus(store(dir.path(), &f), bus, cfg).unwrap();
    let id = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let r = wf.wait(&id, DEADLINE).unwrap();
    assert_eq!(r.state, RequestState::Completed, "{:?}", r.failure);
    assert!(wf.log().iter().any(|r| r.event == LogEvent::Duplicate));
    assert_eq!(wf.training_runs(), 1);
    assert_eq!(count(&wf, &id, MessageKind::ModelReady), 1);
}

#[test]
fn injected_failures_are_redelivered() {
    let cfg = WorkflowConfig {
        faults: FaultPlan::default().fail(Service::BuildingData, 2),
        ..workflow_config(quick_model(0))
    };
    let (_dir, wf) = start(cfg);
    let id = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let r = wf.wait(&id, DEADLINE).unwrap();
    assert_eq!(r.state, RequestState::Completed, "{:?}", r.failure);
    let log = wf.log();
    assert_eq!(log.iter().filter(|r| r.event == LogEvent::Fault).count(), 2);
    assert_eq!(log.iter().filter(|r| r.event == LogEvent::Redeliver).count(), 2);
}

#[test]
fn exhausted_redelivery_fails_the_request() {
    let cfg = WorkflowConfig {
        faults: FaultPlan::default().fail(Service::WeatherData, 3),
        ..workflow_config(quick_model(0))
    };
    let (_dir, wf) = start(cfg);
    let id = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let r = wf.wait(&id, DEADLINE).unwrap();
    assert_eq!(r.state, RequestState::Failed);
    assert!(r.failure.unwrap().contains("weather-data"));
    assert_eq!(count(&wf, &id, MessageKind::Failure), 1);
    assert_eq!(wf.training_runs(), 0);
}

#[test]
fn identical_queries_reuse_the_cached_model() {
    let (_dir, wf) = start(workflow_config(quick_model(0)));
    let a = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let ra = wf.wait(&a, DEADLINE).unwrap();
    let b = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let rb = wf.wait(&b, DEADLINE).unwrap();
    assert_eq!(wf.training_runs(), 1);
    let (fa, fb) = (ra.forecast.unwrap(), rb.forecast.unwrap());
    assert!(!fa.from_cache && fb.from_cache);
    assert_eq!(fa.values, fb.values);
}

#[test]
fn replaying_the_log_reproduces_terminal_states() {
    let dir = tempfile::tempdir().unwrap();
    let f = fleet(1, 3, 90);
    let cfg = WorkflowConfig {
        faults: FaultPlan::default().fail(Service::BuildingData, 1),
        ..workflow_config(quick_model(0))
    };
    let wf = Workflow::start(store(dir.path(), &f), cfg.clone()).unwrap();
    let a = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let b = wf.submit("occupants=3, house_type=bungalow, construction_year=1975-1980, bedrooms=2, appliances=20", 7, SelectionRule::TopK(1)).unwrap();
    let original = wf.wait_all(DEADLINE);
    wf.shutdown();
    let log = wf.log();
    let folded = states_from_log(&log);
    assert_eq!(folded[&a], original[&a].state);
    assert_eq!(folded[&b], original[&b].state);

    let path = dir.path().join("messages.ndjson");
    crossgrid::workflow::write_log(&log, &path).unwrap();
    let read = crossgrid::workflow::read_log(&path).unwrap();
    let again = replay(&read, StoreCatalog::open(dir.path()).unwrap(), cfg, DEADLINE).unwrap();
    for id in [&a, &b] {
        assert_eq!(again[id].state, original[id].state);
        assert_eq!(again[id].forecast.as_ref().map(|f| &f.values), original[id].forecast.as_ref().map(|f| &f.values));
    }
}

#[test]
fn shutdown_fails_in_flight_requests() {
    let cfg = workflow_config(crossgrid::model::ModelConfig {
        max_epochs: 100_000,
        patience: 99_999,
        ..quick_model(0)
    });
    let (_dir, wf) = start(cfg);
    let id = wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).unwrap();
    let t0 = std::time::Instant::now();
    while wf.poll(&id).unwrap().state != RequestState::DataLoaded {
        assert!(t0.elapsed() < DEADLINE, "request never reached training");
        std::thread::sleep(Duration::from_millis(5));
    }
    // the learning service is now inside a very long training run
    wf.shutdown();
    let r = wf.poll(&id).unwrap();
    assert_eq!(r.state, RequestState::Failed);
    assert_eq!(r.failure.as_deref(), Some("shutdown"));
    assert_eq!(count(&wf, &id, MessageKind::Failure), 1);
    assert!(wf.submit(GROUP_A_TARGET, 7, SelectionRule::TopK(2)).is_err());
}

fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> (u16, serde_json::Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    let status: u16 = out.split_whitespace().nth(1).unwrap().parse().unwrap();
    let json = out.split("\r\n\r\n").nth(1).unwrap_or("null");
    (status, serde_json::from_str(json).unwrap())
}

#[test]
fn http_submit_poll_result_round_trip() {
    let (_dir, wf) = start(workflow_config(quick_model(0)));
    let wf = Arc::new(wf);
    let server = Arc::new(HttpServer::bind("127.0.0.1:0", Arc::clone(&wf)).unwrap());
    let addr = server.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let handle = {
        let (server, stop) = (Arc::clone(&server), Arc::clone(&stop));
        std::thread::spawn(move || server.serve_until(&stop))
    };

    let (status, doc) = http(addr, "POST", "/requests?k=2", GROUP_A_TARGET);
    assert_eq!(status, 202);
    let id = doc["request_id"].as_str().unwrap().to_string();
    let (status, _) = http(addr, "POST", "/requests", "occupants=2, pool_count=3");
    assert_eq!(status, 400);
    let (status, _) = http(addr, "POST", "/requests?k=0", GROUP_A_TARGET);
    assert_eq!(status, 400);
    assert_eq!(http(addr, "GET", "/requests/nope", "").0, 404);

    wf.wait(&id, DEADLINE).unwrap();
    let (status, doc) = http(addr, "GET", &format!("/requests/{id}"), "");
    assert_eq!(status, 200);
    assert_eq!(doc["state"], "completed");
    let (status, doc) = http(addr, "GET", &format!("/requests/{id}/result"), "");
    assert_eq!(status, 200);
    assert_eq!(doc["forecast"]["values"].as_array().unwrap().len(), 7);

    stop.store(true, Ordering::SeqCst);
    handle.join().unwrap().unwrap();
}

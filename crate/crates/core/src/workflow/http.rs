//! HTTP surface over a running [`Workflow`].
//!
//! | method | path                    | answer                                   |
//! |--------|-------------------------|------------------------------------------|
//! | POST   | `/requests[?k=3]`       | 202 `{"request_id": ...}`, 400 on bad input |
//! | GET    | `/requests/{id}`        | 200 request record, 404 if unknown       |
//! | GET    | `/requests/{id}/result` | 200 forecast, 409 while not completed    |
//!
//! The POST body is the key-value description; `k=<n>` or
//! `threshold=<d>` in the query string picks the selection rule.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::engine::{Workflow, FORECAST_HORIZON};
use super::RequestState;
use crate::error::{Error, Result};
use crate::selection::SelectionRule;

pub struct HttpServer {
    server: tiny_http::Server,
    workflow: Arc<Workflow>,
}

impl HttpServer {
    pub fn bind(addr: &str, workflow: Arc<Workflow>) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::invalid(format!("cannot listen on {addr}: {e}")))?;
        Ok(HttpServer { server, workflow })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.server.server_addr().to_ip()
    }

    /// Answers requests until `stop` is set.
    pub fn serve_until(&self, stop: &AtomicBool) -> Result<()> {
        while !stop.load(Ordering::SeqCst) {
            let mut req = match self.server.recv_timeout(Duration::from_millis(100)) {
                Ok(Some(r)) => r,
                Ok(None) => continue,
                Err(e) => return Err(Error::io("http listener", e)),
            };
            let mut body = String::new();
            let (status, doc) = match req.as_reader().read_to_string(&mut body) {
                Ok(_) => route(&self.workflow, req.method().as_str(), req.url(), &body),
                Err(e) => (400, json!({ "error": format!("unreadable body: {e}") })),
            };
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
            let resp = tiny_http::Response::from_string(doc.to_string())
                .with_status_code(status)
                .with_header(header);
            if let Err(e) = req.respond(resp) {
                log::warn!("failed to answer http request: {e}");
            }
        }
        Ok(())
    }
}

fn rule_from_query(query: &str) -> Result<SelectionRule> {
    let mut rule = SelectionRule::default();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        match k {
            "k" | "threshold" => rule = format!("{k}={v}").parse()?,
            other => return Err(Error::invalid(format!("unknown query parameter `{other}`"))),
        }
    }
    Ok(rule)
}

fn error(status: u16, e: impl std::fmt::Display) -> (u16, Value) {
    (status, json!({ "error": e.to_string() }))
}

/// Maps one request to a status code and JSON document.
pub fn route(workflow: &Workflow, method: &str, url: &str, body: &str) -> (u16, Value) {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    match (method, parts.as_slice()) {
        ("POST", ["requests"]) => {
            let rule = match rule_from_query(query) {
                Ok(r) => r,
                Err(e) => return error(400, e),
            };
            match workflow.submit(body, FORECAST_HORIZON, rule) {
                Ok(id) => (202, json!({ "request_id": id, "state": RequestState::Received })),
                Err(e) => error(400, e),
            }
        }
        ("GET", ["requests", id]) => match workflow.poll(id) {
            Ok(r) => (200, serde_json::to_value(r).unwrap_or(Value::Null)),
            Err(e) => error(404, e),
        },
        ("GET", ["requests", id, "result"]) => match workflow.poll(id) {
            Ok(r) => match (&r.state, &r.forecast) {
                (RequestState::Completed, Some(f)) => (
                    200,
                    json!({ "request_id": r.request_id, "forecast": f, "selection": r.selection }),
                ),
                _ => (
                    409,
                    json!({ "request_id": r.request_id, "state": r.state, "failure": r.failure }),
                ),
            },
            Err(e) => error(404, e),
        },
        (_, ["requests", ..]) => error(405, format!("{method} not allowed on {path}")),
        _ => error(404, format!("no route for {path}")),
    }
}

//! HTTP face of the risk service: POST /risk with a JSON request body,
//! exactly one JSON line back. Latency injection happens in the worker
//! thread after provider evaluation, so concurrent requests delay
//! independently.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::service::{serve_risk, RiskRequest, ServiceState};

pub const DEFAULT_PORT: u16 = 8077;
pub const PORT_ENV_VAR: &str = "RISKGATE_PORT";

const WORKERS: usize = 4;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

/// Listen port: RISKGATE_PORT when set, 8077 otherwise.
pub fn port_from_env() -> u16 {
    std::env::var(PORT_ENV_VAR)
        .ok()
        .and_then(|raw| raw.parse().ok())
        .unwrap_or(DEFAULT_PORT)
}

pub struct RiskServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<thread::JoinHandle<()>>,
}

impl RiskServer {
    /// Bind `addr` (e.g. "0.0.0.0:8077", port 0 for ephemeral) and serve
    /// until `shutdown`.
    pub fn start(addr: &str, state: ServiceState) -> Result<RiskServer, HttpError> {
        let server = tiny_http::Server::http(addr).map_err(|e| HttpError::Bind {
            addr: addr.to_string(),
            reason: e.to_string(),
        })?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| HttpError::Bind {
                addr: addr.to_string(),
                reason: "no ip listener".into(),
            })?;
        let server = Arc::new(server);
        let shared = Arc::new(Mutex::new(state));
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let shared = Arc::clone(&shared);
                thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        handle(request, &shared);
                    }
                })
            })
            .collect();
        Ok(RiskServer {
            server,
            addr: bound,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.server.unblock();
        for worker in self.workers {
            let _ = worker.join();
        }
    }
}

fn handle(mut request: tiny_http::Request, shared: &Mutex<ServiceState>) {
    let (status, body, delay) = route(&mut request, shared);
    if delay > 0.0 {
        thread::sleep(Duration::from_secs_f64(delay));
    }
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                .expect("static header"),
        );
    let _ = request.respond(response);
}

fn route(request: &mut tiny_http::Request, shared: &Mutex<ServiceState>) -> (u16, String, f64) {
    if request.method() != &tiny_http::Method::Post || request.url() != "/risk" {
        return (404, "{\"error\": \"expected POST /risk\"}".into(), 0.0);
    }
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        return (400, "{\"error\": \"unreadable body\"}".into(), 0.0);
    }
    let risk_request: RiskRequest = match serde_json::from_str(&body) {
        Ok(parsed) => parsed,
        Err(e) => {
            return (
                400,
                serde_json::json!({ "error": format!("bad request: {e}") }).to_string(),
                0.0,
            )
        }
    };
    let reply = {
        let mut state = shared.lock().expect("service state poisoned");
        serve_risk(&risk_request, &mut state)
    };
    (reply.status, reply.body, reply.delay)
}

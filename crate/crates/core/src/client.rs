//! Non-blocking risk client: schedules queries on the control-step cadence,
//! keeps at most a configured number of requests in flight, and delivers
//! completed responses through a poll call that never waits.
//!
//! Two transports exist. The virtual-time transport invokes the service
//! in-process at dispatch and schedules delivery at `t_issued + latency`,
//! making whole episodes bit-reproducible. The HTTP transport performs real
//! POSTs on background threads and maps wall-clock round-trip times onto
//! simulation time at delivery.

use std::sync::mpsc;
use std::time::Instant;

use thiserror::Error;

use crate::alpha::AlphaPolicyConfig;
use crate::service::{parse_risk_response, serve_risk, RiskRequest, ServiceState};
use crate::world::SceneSnapshot;

/// Controller-side instruction appended to every query, with the runtime
/// context interpolated at three decimals.
pub fn build_context(h_min: f64, v: f64) -> String {
    assert!(!h_min.is_nan() && !v.is_nan(), "context values must not be NaN");
    format!(
        "You are a safety estimator for a mobile robot. Given the current RGB view \
from a camera mounted on the robot, estimate current collision risk as a number \
in [0,1]. Lower values meaning lower imminent collision risk, and higher values \
meaning imminent collision risk. Return strict JSON only with keys: risk (0..1 \
float). Context: h_min={h_min:.3} and current speed v={v:.3} m/s."
    )
}

/// A validated risk estimate with its timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub r: f64,
    /// Simulation time the frame was captured.
    pub t_issued: f64,
    /// Simulation time the response landed.
    pub t_received: f64,
    pub request_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InFlight {
    pub request_id: u64,
    pub t_issued: f64,
}

/// A completed transport exchange, success or not. Status 0 marks a
/// transport-level failure with no HTTP response at all.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportReply {
    pub request_id: u64,
    pub t_issued: f64,
    pub t_received: f64,
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Error)]
#[error("transport down: {0}")]
pub struct TransportDown(pub String);

/// Delivery side of the asynchronous query loop.
pub trait RiskTransport {
    /// Hand a request to the transport. Must not block on the response.
    fn dispatch(&mut self, request: RiskRequest, t_issued: f64) -> Result<(), TransportDown>;

    /// Responses that have completed by simulation time `t`, ordered by
    /// delivery time. Must never wait.
    fn poll(&mut self, t: f64) -> Vec<TransportReply>;
}

/// Client-side bookkeeping.
#[derive(Debug, Default)]
pub struct ClientState {
    pub latest: Option<RiskEstimate>,
    pub in_flight: Vec<InFlight>,
    pub latency_samples: Vec<f64>,
    pub requests_sent: u64,
    pub requests_received: u64,
    pub requests_failed: u64,
}

pub struct RiskClient {
    state: ClientState,
    transport: Box<dyn RiskTransport>,
    /// Queue depth; 1 gives the skip-when-busy cadence.
    max_in_flight: usize,
    next_request_id: u64,
}

impl RiskClient {
    pub fn new(transport: Box<dyn RiskTransport>) -> Self {
        RiskClient {
            state: ClientState::default(),
            transport,
            max_in_flight: 1,
            next_request_id: 0,
        }
    }

    pub fn with_max_in_flight(mut self, depth: usize) -> Self {
        self.max_in_flight = depth.max(1);
        self
    }

    /// True when this step is on the query cadence and capacity is free.
    pub fn should_query(&self, step: u32, cfg: &AlphaPolicyConfig) -> bool {
        step % cfg.query_period_steps == 0 && self.state.in_flight.len() < self.max_in_flight
    }

    /// Issue a query for the given frame. Never blocks; a synchronous
    /// transport failure is recorded as a failed request.
    pub fn submit_request(&mut self, frame: SceneSnapshot, context: String, t: f64) {
        debug_assert!(self.state.in_flight.len() < self.max_in_flight);
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        self.state.requests_sent += 1;
        let request = RiskRequest {
            image_png_base64: None,
            scene: Some(frame),
            context,
            request_id,
        };
        match self.transport.dispatch(request, t) {
            Ok(()) => self.state.in_flight.push(InFlight {
                request_id,
                t_issued: t,
            }),
            Err(_) => self.state.requests_failed += 1,
        }
    }

    /// Drain completed responses up to simulation time `t`. Valid responses
    /// update `latest` (receipt time never moves backwards); malformed or
    /// failed ones only bump the failure counter. Returns the estimate
    /// installed by this poll, if any.
    pub fn poll_responses(&mut self, t: f64) -> Option<RiskEstimate> {
        let mut newly_arrived = None;
        for reply in self.transport.poll(t) {
            self.state
                .in_flight
                .retain(|f| f.request_id != reply.request_id);
            if reply.status != 200 {
                self.state.requests_failed += 1;
                continue;
            }
            match parse_risk_response(&reply.body) {
                Ok(r) => {
                    self.state.requests_received += 1;
                    self.state
                        .latency_samples
                        .push(reply.t_received - reply.t_issued);
                    let estimate = RiskEstimate {
                        r,
                        t_issued: reply.t_issued,
                        t_received: reply.t_received,
                        request_id: reply.request_id,
                    };
                    if self
                        .state
                        .latest
                        .map_or(true, |held| estimate.t_received > held.t_received)
                    {
                        self.state.latest = Some(estimate);
                        newly_arrived = Some(estimate);
                    }
                }
                Err(_) => self.state.requests_failed += 1,
            }
        }
        newly_arrived
    }

    pub fn latest(&self) -> Option<RiskEstimate> {
        self.state.latest
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }
}

/// Deterministic transport: the service runs in-process at dispatch time and
/// the reply is held until simulation time reaches `t_issued + latency`.
pub struct VirtualTimeTransport {
    service: ServiceState,
    pending: Vec<TransportReply>,
}

impl VirtualTimeTransport {
    pub fn new(service: ServiceState) -> Self {
        VirtualTimeTransport {
            service,
            pending: Vec::new(),
        }
    }
}

impl RiskTransport for VirtualTimeTransport {
    fn dispatch(&mut self, request: RiskRequest, t_issued: f64) -> Result<(), TransportDown> {
        let reply = serve_risk(&request, &mut self.service);
        self.pending.push(TransportReply {
            request_id: request.request_id,
            t_issued,
            t_received: t_issued + reply.delay,
            status: reply.status,
            body: reply.body,
        });
        Ok(())
    }

    fn poll(&mut self, t: f64) -> Vec<TransportReply> {
        let mut due: Vec<TransportReply> = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].t_received <= t {
                due.push(self.pending.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by(|a, b| {
            a.t_received
                .total_cmp(&b.t_received)
                .then(a.request_id.cmp(&b.request_id))
        });
        due
    }
}

/// Real transport: each dispatch spawns a worker that POSTs to the service
/// and reports back through a channel. The wall-clock round trip is mapped
/// onto simulation time as `t_received = t_issued + elapsed`.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
    tx: mpsc::Sender<TransportReply>,
    rx: mpsc::Receiver<TransportReply>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        let (tx, rx) = mpsc::channel();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            url: url.into(),
            agent,
            tx,
            rx,
        }
    }
}

impl RiskTransport for HttpTransport {
    fn dispatch(&mut self, request: RiskRequest, t_issued: f64) -> Result<(), TransportDown> {
        let body = serde_json::to_string(&request)
            .map_err(|e| TransportDown(format!("encode request: {e}")))?;
        let url = self.url.clone();
        let agent = self.agent.clone();
        let tx = self.tx.clone();
        let request_id = request.request_id;
        std::thread::spawn(move || {
            let started = Instant::now();
            let outcome = agent
                .post(&url)
                .header("content-type", "application/json")
                .send(body.as_str());
            let elapsed = started.elapsed().as_secs_f64();
            let reply = match outcome {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    TransportReply {
                        request_id,
                        t_issued,
                        t_received: t_issued + elapsed,
                        status,
                        body: text,
                    }
                }
                Err(e) => TransportReply {
                    request_id,
                    t_issued,
                    t_received: t_issued + elapsed,
                    status: 0,
                    body: e.to_string(),
                },
            };
            let _ = tx.send(reply);
        });
        Ok(())
    }

    fn poll(&mut self, _t: f64) -> Vec<TransportReply> {
        let mut due = Vec::new();
        while let Ok(reply) = self.rx.try_recv() {
            due.push(reply);
        }
        due
    }
}

//! Risk-gated safety filtering for planar robot navigation.
//!
//! The stack couples a goal-seeking controller to a barrier-based velocity
//! filter whose conservativeness parameter is driven, asynchronously, by a
//! bounded risk score. A geometric speed-aware cap bounds how aggressive the
//! risk score may make the controller, and a staleness test swaps in a
//! conservative fallback whenever the score is delayed or missing.
//!
//! Module map:
//! - [`world`]: scenarios, obstacle motion laws, clearance queries
//! - [`cbf`]: barrier constraints and the exact 2-D safety QP
//! - [`alpha`]: risk-to-alpha mapping, dynamic cap, staleness, fusion
//! - [`client`]: non-blocking query client with virtual-time and HTTP transports
//! - [`service`]: risk providers, latency injection, the response parser
//! - [`http`]: the HTTP endpoint wrapper around the service
//! - [`sim`]: the per-step control loop and episode metrics

pub mod alpha;
pub mod cbf;
pub mod client;
pub mod http;
pub mod service;
pub mod sim;
pub mod world;

pub use alpha::{AlphaDecision, AlphaPolicyConfig, AlphaSource, CapMode};
pub use cbf::{FilterResult, HalfplaneConstraint, QpError};
pub use client::{HttpTransport, RiskClient, RiskEstimate, RiskTransport, VirtualTimeTransport};
pub use service::{
    LatencyKind, LatencySpec, ParseRiskError, RiskProviderSpec, RiskRequest, ServiceState,
};
pub use sim::{
    run_episode, EpisodeOutcome, EpisodeResult, EpisodeSetup, PolicyVariant, SimOptions, StepTrace,
};
pub use world::{
    builtin_scenario, builtin_scenarios, MotionLaw, ObstacleSpec, RobotState, ScenarioSpec,
    SceneSnapshot, Vec2,
};

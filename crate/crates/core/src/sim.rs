//! Episode runner: per step, deliver/queue risk responses, fuse alpha,
//! filter the nominal control through the safety QP, convert to
//! differential-drive commands, and integrate unicycle kinematics.
//!
//! Episodes in virtual-time mode are bit-reproducible: the only random
//! streams (latency, provider noise) are seeded from the episode seed.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alpha::{
    dynamic_cap, fuse_alpha, is_stale, risk_to_alpha, AlphaPolicyConfig, CapMode,
};
use crate::cbf::{
    barrier_evals, build_constraints_opts, nominal_control, solve_safety_qp, world_to_diffdrive,
    QpError,
};
use crate::client::{build_context, RiskClient, VirtualTimeTransport};
use crate::service::{LatencySpec, RiskProviderSpec, ServiceState};
use crate::world::{wrap_angle, RobotState, ScenarioSpec, SceneSnapshot, SnapshotObstacle, Vec2};

/// Controller policy under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyVariant {
    /// Risk-driven alpha, gated by the dynamic cap and staleness fallback.
    Adaptive,
    /// Risk-driven alpha with the cap disabled.
    AdaptiveNoCap,
    /// Constant alpha; the risk service is never queried.
    Fixed(f64),
}

impl FromStr for PolicyVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(PolicyVariant::Adaptive),
            "nocap" => Ok(PolicyVariant::AdaptiveNoCap),
            _ => {
                if let Some(raw) = s.strip_prefix("fixed:") {
                    let alpha: f64 = raw
                        .parse()
                        .map_err(|_| format!("bad fixed alpha `{raw}`"))?;
                    Ok(PolicyVariant::Fixed(alpha))
                } else {
                    Err(format!(
                        "unknown variant `{s}` (expected adaptive|nocap|fixed:<alpha>)"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyVariant::Adaptive => write!(f, "adaptive"),
            PolicyVariant::AdaptiveNoCap => write!(f, "nocap"),
            PolicyVariant::Fixed(alpha) => write!(f, "fixed:{alpha}"),
        }
    }
}

/// Loop constants that are not part of the scenario or alpha pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Heading proportional gain for the diff-drive conversion, 1/s.
    pub k_heading: f64,
    /// Include the obstacle-velocity term in CBF constraints.
    pub use_obstacle_velocity: bool,
    /// Risk-client queue depth.
    pub max_in_flight: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            k_heading: 2.0,
            use_obstacle_velocity: true,
            max_in_flight: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeOutcome {
    GoalReached,
    Collision,
    Timeout,
}

/// One executed control step, fully observable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: u32,
    pub t: f64,
    pub p: Vec2,
    pub psi: f64,
    pub v_cmd: f64,
    pub omega_cmd: f64,
    pub u_nom: Vec2,
    pub u_safe: Vec2,
    pub alpha_vlm: Option<f64>,
    pub alpha_cap_soft: f64,
    pub alpha_cap_hard: f64,
    pub alpha_final: f64,
    pub stale: bool,
    pub risk: Option<f64>,
    pub h_min: f64,
    pub margin: f64,
    pub qp_feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub max: f64,
    pub count: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats {
                mean: 0.0,
                max: 0.0,
                count: 0,
            };
        }
        LatencyStats {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            max: samples.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            count: samples.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub outcome: EpisodeOutcome,
    /// Present iff the goal was reached.
    pub time_to_goal: Option<f64>,
    /// Minimum clearance margin over the trace, meters.
    pub min_margin: f64,
    /// Total displacement, meters.
    pub path_length: f64,
    pub steps: u32,
    pub trace: Vec<StepTrace>,
    pub latency_stats: LatencyStats,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Everything one episode needs.
#[derive(Debug, Clone)]
pub struct EpisodeSetup<'a> {
    pub scenario: &'a ScenarioSpec,
    pub variant: PolicyVariant,
    pub alpha_cfg: AlphaPolicyConfig,
    pub provider: RiskProviderSpec,
    pub latency: LatencySpec,
    pub seed: u64,
    pub options: SimOptions,
}

impl<'a> EpisodeSetup<'a> {
    /// Adaptive policy with an oracle provider and default knobs.
    pub fn new(scenario: &'a ScenarioSpec) -> Self {
        EpisodeSetup {
            scenario,
            variant: PolicyVariant::Adaptive,
            alpha_cfg: AlphaPolicyConfig::default(),
            provider: RiskProviderSpec::oracle(),
            latency: LatencySpec::zero(),
            seed: 1,
            options: SimOptions::default(),
        }
    }
}

/// Explicit-Euler unicycle step. Translation uses the pre-step heading.
pub fn integrate_step(state: &RobotState, v: f64, omega: f64, dt: f64) -> RobotState {
    RobotState {
        p: Vec2::new(
            state.p.x + v * state.psi.cos() * dt,
            state.p.y + v * state.psi.sin() * dt,
        ),
        psi: wrap_angle(state.psi + omega * dt),
        v,
        omega,
        t: state.t + dt,
    }
}

/// Termination test at the given state and executed-step count.
/// Collision means physical contact (padding excluded); precedence is
/// collision over goal over timeout.
pub fn check_termination(
    state: &RobotState,
    scenario: &ScenarioSpec,
    step: u32,
) -> Option<EpisodeOutcome> {
    let contact = scenario.obstacles.iter().any(|obs| {
        (state.p - obs.position_at(state.t)).norm() <= scenario.robot_radius + obs.radius
    });
    if contact {
        return Some(EpisodeOutcome::Collision);
    }
    if (state.p - scenario.goal).norm() <= scenario.goal_tolerance {
        return Some(EpisodeOutcome::GoalReached);
    }
    if step >= scenario.max_steps {
        return Some(EpisodeOutcome::Timeout);
    }
    None
}

/// Frame handed to the risk service: ground-truth scene plus the barrier
/// and margin summaries.
pub fn scene_snapshot(state: &RobotState, scenario: &ScenarioSpec, t: f64) -> SceneSnapshot {
    let h_min = barrier_evals(state.p, scenario, t)
        .iter()
        .map(|e| e.h)
        .fold(f64::INFINITY, f64::min);
    let (margin, _) = scenario.clearance_margin(state.p, t);
    SceneSnapshot {
        t,
        robot: *state,
        obstacles: scenario
            .obstacles
            .iter()
            .map(|o| SnapshotObstacle {
                id: o.id,
                center: o.position_at(t),
                velocity: o.velocity_at(t),
                radius: o.radius,
            })
            .collect(),
        goal: scenario.goal,
        h_min,
        margin,
    }
}

/// Run one episode to termination.
pub fn run_episode(setup: &EpisodeSetup) -> Result<EpisodeResult, SimError> {
    let scenario = setup.scenario;
    let cfg = &setup.alpha_cfg;
    scenario
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| SimError::Config(e.to_string()))?;
    if !(setup.options.k_heading > 0.0 && setup.options.k_heading.is_finite()) {
        return Err(SimError::Config("k_heading must be positive".into()));
    }
    if let PolicyVariant::Fixed(alpha) = setup.variant {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SimError::Config("fixed alpha must be positive".into()));
        }
    }

    let uses_risk = matches!(
        setup.variant,
        PolicyVariant::Adaptive | PolicyVariant::AdaptiveNoCap
    );
    let mut client = if uses_risk {
        setup
            .latency
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let service = ServiceState::new(&setup.provider, &setup.latency, *cfg, setup.seed)
            .map_err(|e| SimError::Config(e.to_string()))?;
        Some(
            RiskClient::new(Box::new(VirtualTimeTransport::new(service)))
                .with_max_in_flight(setup.options.max_in_flight),
        )
    } else {
        None
    };

    let mut state = RobotState::at_rest(scenario.start, scenario.start_heading);
    let mut trace: Vec<StepTrace> = Vec::new();
    let mut path_length = 0.0;

    let outcome = loop {
        let step = trace.len() as u32;
        if let Some(outcome) = check_termination(&state, scenario, step) {
            break outcome;
        }
        let t = state.t;

        // 1. Risk query on cadence; deliver anything due. Never blocks.
        let mut held = None;
        if let Some(client) = client.as_mut() {
            if client.should_query(step, cfg) {
                let frame = scene_snapshot(&state, scenario, t);
                let context = build_context(frame.h_min, state.v);
                client.submit_request(frame, context, t);
            }
            client.poll_responses(t);
            held = client.latest();
        }

        // 2. Geometric quantities and the speed estimate (last commanded v).
        let (margin, _) = scenario.clearance_margin(state.p, t);
        let speed = state.v;

        // 3. Conservativeness for this step.
        let alpha_vlm = held.map(|e| risk_to_alpha(e.r, cfg));
        let t_vlm = held.map(|e| e.t_received);
        let (stale, alpha_final, cap_soft, cap_hard) = match setup.variant {
            PolicyVariant::Adaptive | PolicyVariant::AdaptiveNoCap => {
                let cap_enabled = setup.variant == PolicyVariant::Adaptive;
                let d = fuse_alpha(alpha_vlm, margin, speed, t, t_vlm, cfg, cap_enabled);
                (d.stale, d.alpha_final, d.alpha_cap_soft, d.alpha_cap_hard)
            }
            PolicyVariant::Fixed(alpha) => (
                is_stale(t, None, cfg),
                alpha,
                dynamic_cap(margin, speed, CapMode::Soft, cfg),
                dynamic_cap(margin, speed, CapMode::Hard, cfg),
            ),
        };

        // 4. Safety filter around the goal-seeking control.
        let u_nom = nominal_control(state.p, scenario.goal, scenario.v_max);
        let constraints = build_constraints_opts(
            &state,
            scenario,
            alpha_final,
            t,
            setup.options.use_obstacle_velocity,
        );
        let filtered = solve_safety_qp(u_nom, &constraints, scenario.v_max)?;

        // 5. Actuate and integrate.
        let (v_cmd, omega_cmd) = world_to_diffdrive(
            filtered.u_safe,
            state.psi,
            scenario.v_max,
            scenario.omega_max,
            setup.options.k_heading,
        );
        let h_min = barrier_evals(state.p, scenario, t)
            .iter()
            .map(|e| e.h)
            .fold(f64::INFINITY, f64::min);

        trace.push(StepTrace {
            step,
            t,
            p: state.p,
            psi: state.psi,
            v_cmd,
            omega_cmd,
            u_nom,
            u_safe: filtered.u_safe,
            alpha_vlm,
            alpha_cap_soft: cap_soft,
            alpha_cap_hard: cap_hard,
            alpha_final,
            stale,
            risk: held.map(|e| e.r),
            h_min,
            margin,
            qp_feasible: filtered.feasible,
        });

        let next = integrate_step(&state, v_cmd, omega_cmd, scenario.dt);
        path_length += (next.p - state.p).norm();
        state = next;
        // Keep the time axis on the exact step grid rather than accumulating.
        state.t = scenario.dt * trace.len() as f64;
    };

    let latency_stats = client
        .as_ref()
        .map(|c| LatencyStats::from_samples(&c.state().latency_samples))
        .unwrap_or(LatencyStats {
            mean: 0.0,
            max: 0.0,
            count: 0,
        });
    let min_margin = trace
        .iter()
        .map(|row| row.margin)
        .fold(f64::INFINITY, f64::min);

    Ok(EpisodeResult {
        outcome,
        time_to_goal: (outcome == EpisodeOutcome::GoalReached).then_some(state.t),
        min_margin,
        path_length,
        steps: trace.len() as u32,
        trace,
        latency_stats,
    })
}

pub const TRACE_CSV_HEADER: &str = "step,t,p_x,p_y,psi,v_cmd,omega_cmd,u_nom_x,u_nom_y,\
u_safe_x,u_safe_y,alpha_vlm,alpha_cap_soft,alpha_cap_hard,alpha_final,stale,risk,h_min,\
margin,qp_feasible";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Write the trace as CSV, one row per executed step.
pub fn write_trace_csv<W: Write>(out: &mut W, trace: &[StepTrace]) -> io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.step,
            row.t,
            row.p.x,
            row.p.y,
            row.psi,
            row.v_cmd,
            row.omega_cmd,
            row.u_nom.x,
            row.u_nom.y,
            row.u_safe.x,
            row.u_safe.y,
            opt(row.alpha_vlm),
            row.alpha_cap_soft,
            row.alpha_cap_hard,
            row.alpha_final,
            row.stale,
            opt(row.risk),
            row.h_min,
            row.margin,
            row.qp_feasible,
        )?;
    }
    Ok(())
}

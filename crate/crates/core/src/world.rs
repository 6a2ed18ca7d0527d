//! World model: robot state, circular obstacles with analytic motion laws,
//! scenario definitions, and the geometric queries the controller consumes.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel id returned by clearance queries when a scenario has no obstacles.
pub const NO_OBSTACLE_ID: i64 = -1;

/// Planar vector in meters (positions) or meters/second (velocities).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Robot pose plus the last commanded body velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// Position in the world frame, meters.
    pub p: Vec2,
    /// Heading (yaw), radians, normalized to (-pi, pi].
    pub psi: f64,
    /// Last commanded forward speed, m/s.
    pub v: f64,
    /// Last commanded yaw rate, rad/s.
    pub omega: f64,
    /// Simulation time, seconds.
    pub t: f64,
}

impl RobotState {
    /// A robot at rest at the given pose, t = 0.
    pub fn at_rest(p: Vec2, psi: f64) -> Self {
        RobotState {
            p,
            psi: wrap_angle(psi),
            v: 0.0,
            omega: 0.0,
            t: 0.0,
        }
    }

    /// World-frame velocity implied by the last commanded (v, psi).
    pub fn world_velocity(&self) -> Vec2 {
        Vec2::new(self.v * self.psi.cos(), self.v * self.psi.sin())
    }
}

/// Closed-form obstacle motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionLaw {
    /// Fixed center.
    Static { at: Vec2 },
    /// Sinusoidal oscillation in y at a fixed x.
    OscillateY {
        x0: f64,
        y0: f64,
        amplitude: f64,
        angular_frequency: f64,
        phase: f64,
    },
    /// Straight-line motion at constant velocity.
    ConstantVelocity { origin: Vec2, velocity: Vec2 },
}

/// A circular obstacle. Height is metadata only; all geometry is planar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub id: i64,
    /// Radius, meters.
    pub radius: f64,
    /// Height, meters (not used by any geometric query).
    pub height: f64,
    pub motion: MotionLaw,
}

impl ObstacleSpec {
    /// Center position at time t.
    pub fn position_at(&self, t: f64) -> Vec2 {
        match self.motion {
            MotionLaw::Static { at } => at,
            MotionLaw::OscillateY {
                x0,
                y0,
                amplitude,
                angular_frequency,
                phase,
            } => Vec2::new(x0, y0 + amplitude * (angular_frequency * t + phase).sin()),
            MotionLaw::ConstantVelocity { origin, velocity } => origin + velocity * t,
        }
    }

    /// Center velocity at time t (exact derivative of `position_at`).
    pub fn velocity_at(&self, t: f64) -> Vec2 {
        match self.motion {
            MotionLaw::Static { .. } => Vec2::ZERO,
            MotionLaw::OscillateY {
                amplitude,
                angular_frequency,
                phase,
                ..
            } => Vec2::new(
                0.0,
                amplitude * angular_frequency * (angular_frequency * t + phase).cos(),
            ),
            MotionLaw::ConstantVelocity { velocity, .. } => velocity,
        }
    }
}

/// A complete navigation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub start: Vec2,
    /// Initial heading, radians.
    pub start_heading: f64,
    pub goal: Vec2,
    pub obstacles: Vec<ObstacleSpec>,
    /// Effective robot radius R_R, meters.
    pub robot_radius: f64,
    /// Safety padding added to the barrier radius sum, meters.
    pub padding: f64,
    /// Speed bound, m/s.
    pub v_max: f64,
    /// Yaw-rate bound, rad/s.
    pub omega_max: f64,
    /// Control period, seconds.
    pub dt: f64,
    pub max_steps: u32,
    /// Goal-reached distance, meters.
    pub goal_tolerance: f64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario `{0}`: {1}")]
    Invalid(String, String),
}

impl ScenarioSpec {
    /// Inflated radius sum R_R + R_j + padding for obstacle j.
    pub fn radius_sum(&self, obstacle: &ObstacleSpec) -> f64 {
        self.robot_radius + obstacle.radius + self.padding
    }

    /// Clearance margin: distance from `p` to the nearest inflated obstacle
    /// boundary, together with that obstacle's id. Ties go to the smallest id;
    /// an empty obstacle list yields (+inf, NO_OBSTACLE_ID).
    pub fn clearance_margin(&self, p: Vec2, t: f64) -> (f64, i64) {
        let mut best = (f64::INFINITY, NO_OBSTACLE_ID);
        for obs in &self.obstacles {
            let m = (p - obs.position_at(t)).norm() - self.radius_sum(obs);
            if m < best.0 || (m == best.0 && obs.id < best.1) {
                best = (m, obs.id);
            }
        }
        best
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: &str| Err(ScenarioError::Invalid(self.name.clone(), msg.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be positive and finite");
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive");
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return fail("v_max must be positive and finite");
        }
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return fail("omega_max must be positive and finite");
        }
        if !(self.goal_tolerance > 0.0 && self.goal_tolerance.is_finite()) {
            return fail("goal_tolerance must be positive and finite");
        }
        if !(self.robot_radius >= 0.0 && self.padding >= 0.0) {
            return fail("robot_radius and padding must be non-negative");
        }
        if !(self.start.is_finite()
            && self.goal.is_finite()
            && self.start_heading.is_finite()
            && self.robot_radius.is_finite()
            && self.padding.is_finite())
        {
            return fail("non-finite geometry");
        }
        if self.start == self.goal {
            return fail("start and goal coincide");
        }
        for obs in &self.obstacles {
            if !(obs.radius > 0.0 && obs.radius.is_finite()) {
                return fail("obstacle radius must be positive and finite");
            }
            match obs.motion {
                MotionLaw::Static { at } => {
                    if !at.is_finite() {
                        return fail("non-finite obstacle position");
                    }
                }
                MotionLaw::OscillateY {
                    x0,
                    y0,
                    amplitude,
                    angular_frequency,
                    phase,
                } => {
                    if !(amplitude >= 0.0 && angular_frequency >= 0.0) {
                        return fail("oscillator amplitude and frequency must be non-negative");
                    }
                    if !(x0.is_finite()
                        && y0.is_finite()
                        && amplitude.is_finite()
                        && angular_frequency.is_finite()
                        && phase.is_finite())
                    {
                        return fail("non-finite oscillator parameters");
                    }
                }
                MotionLaw::ConstantVelocity { origin, velocity } => {
                    if !(origin.is_finite() && velocity.is_finite()) {
                        return fail("non-finite motion parameters");
                    }
                }
            }
        }
        Ok(())
    }
}

/// A snapshot of everything the risk service may see for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub t: f64,
    pub robot: RobotState,
    pub obstacles: Vec<SnapshotObstacle>,
    pub goal: Vec2,
    /// Minimum barrier value over obstacles, m^2 (+inf when no obstacles).
    #[serde(with = "option_infinite")]
    pub h_min: f64,
    /// Clearance margin to the nearest inflated boundary, meters (+inf when
    /// no obstacles).
    #[serde(with = "option_infinite")]
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotObstacle {
    pub id: i64,
    pub center: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

/// JSON has no +inf; encode the empty-scene sentinel as null.
mod option_infinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            value.serialize(ser)
        } else {
            ser.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(de)?.unwrap_or(f64::INFINITY))
    }
}

const SIXTY_HZ: f64 = 1.0 / 60.0;

fn base_scenario(name: &str, obstacles: Vec<ObstacleSpec>) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        start: Vec2::ZERO,
        start_heading: 0.0,
        goal: Vec2::new(9.0, 0.0),
        obstacles,
        robot_radius: 0.30,
        padding: 0.05,
        v_max: 0.50,
        omega_max: 0.9,
        dt: SIXTY_HZ,
        max_steps: 1800,
        goal_tolerance: 0.30,
    }
}

/// The four benchmark scenarios: a single frontal obstacle, a cluttered
/// field, two crossing oscillators, and a head-on mover.
pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    let frontal = base_scenario(
        "frontal",
        vec![ObstacleSpec {
            id: 0,
            radius: 0.4,
            height: 0.6,
            motion: MotionLaw::Static {
                at: Vec2::new(5.0, 0.0),
            },
        }],
    );

    let cluttered_layout = [
        (0.28, 2.0, 0.5),
        (0.30, 4.0, -0.7),
        (0.35, 5.5, 0.6),
        (0.42, 7.0, -0.3),
    ];
    let cluttered = base_scenario(
        "cluttered",
        cluttered_layout
            .iter()
            .enumerate()
            .map(|(i, &(radius, x, y))| ObstacleSpec {
                id: i as i64,
                radius,
                height: 0.6,
                motion: MotionLaw::Static {
                    at: Vec2::new(x, y),
                },
            })
            .collect(),
    );

    let dynamic_crossing = base_scenario(
        "dynamic_crossing",
        vec![
            ObstacleSpec {
                id: 0,
                radius: 0.4,
                height: 0.6,
                motion: MotionLaw::OscillateY {
                    x0: 5.0,
                    y0: 0.0,
                    amplitude: 1.2,
                    angular_frequency: 0.55,
                    phase: 0.0,
                },
            },
            ObstacleSpec {
                id: 1,
                radius: 0.4,
                height: 0.6,
                motion: MotionLaw::OscillateY {
                    x0: 7.0,
                    y0: 0.0,
                    amplitude: 1.5,
                    angular_frequency: 0.85,
                    phase: 0.0,
                },
            },
        ],
    );

    let dynamic_frontal = base_scenario(
        "dynamic_frontal",
        vec![ObstacleSpec {
            id: 0,
            radius: 0.4,
            height: 0.6,
            motion: MotionLaw::ConstantVelocity {
                origin: Vec2::new(5.0, 0.0),
                velocity: Vec2::new(-0.35, 0.0),
            },
        }],
    );

    vec![frontal, cluttered, dynamic_crossing, dynamic_frontal]
}

/// Look up a built-in scenario by name.
pub fn builtin_scenario(name: &str) -> Option<ScenarioSpec> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}

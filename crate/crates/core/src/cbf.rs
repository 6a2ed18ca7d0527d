//! Barrier evaluation and the velocity-space safety filter.
//!
//! The filter solves, exactly, the two-dimensional projection problem
//!
//! ```text
//!     minimize   1/2 ||u - u_nom||^2
//!     subject to a_i . u >= b_i   for every obstacle constraint i
//!                ||u|| <= v_max
//! ```
//!
//! by enumerating the finitely many candidate optima of the active-set
//! characterization: the unconstrained point, single-line projections,
//! line/line vertices, the ball projection, and line/circle vertices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{wrap_angle, RobotState, ScenarioSpec, Vec2};

/// Feasibility slack used both to accept candidates and in the contract of
/// returned solutions.
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// Per-obstacle barrier snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub obstacle_id: i64,
    /// Barrier value, m^2. Positive inside the safe set.
    pub h: f64,
    /// Spatial gradient dh/dp = 2 (p - c), meters.
    pub grad: Vec2,
    /// Obstacle center velocity, m/s.
    pub c_dot: Vec2,
}

/// Linear constraint `a . u >= b` in velocity space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfplaneConstraint {
    pub a: Vec2,
    pub b: f64,
    /// Obstacle the constraint came from; free-form for synthetic constraints.
    pub obstacle_id: i64,
}

/// Output of the safety filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub u_safe: Vec2,
    /// Ids of obstacle constraints active (tight) at the solution.
    pub active_set: Vec<i64>,
    pub feasible: bool,
    /// Worst normalized constraint violation at `u_safe`, m/s. ~0 when
    /// feasible; positive when the filter had to fall back.
    pub qp_residual: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("non-finite input to the safety filter")]
    NonFiniteInput,
    #[error("speed bound must be positive")]
    NonPositiveSpeedBound,
}

/// Squared-distance barrier: ||p - c||^2 - r_sum^2.
pub fn barrier_value(p: Vec2, c: Vec2, r_sum: f64) -> f64 {
    (p - c).norm_sq() - r_sum * r_sum
}

/// Goal-seeking velocity, capped at v_max.
pub fn nominal_control(p: Vec2, goal: Vec2, v_max: f64) -> Vec2 {
    let to_goal = goal - p;
    let dist = to_goal.norm();
    if dist == 0.0 {
        Vec2::ZERO
    } else {
        to_goal * (v_max / dist).min(1.0)
    }
}

/// Evaluate every obstacle barrier at time t.
pub fn barrier_evals(p: Vec2, scenario: &ScenarioSpec, t: f64) -> Vec<BarrierEval> {
    scenario
        .obstacles
        .iter()
        .map(|obs| {
            let c = obs.position_at(t);
            BarrierEval {
                obstacle_id: obs.id,
                h: barrier_value(p, c, scenario.radius_sum(obs)),
                grad: (p - c) * 2.0,
                c_dot: obs.velocity_at(t),
            }
        })
        .collect()
}

/// One halfplane per obstacle: grad . u >= -alpha h + grad . c_dot.
///
/// The `include_obstacle_velocity` flag drops the grad . c_dot term for
/// ablation runs against purely positional constraints.
pub fn build_constraints_opts(
    state: &RobotState,
    scenario: &ScenarioSpec,
    alpha: f64,
    t: f64,
    include_obstacle_velocity: bool,
) -> Vec<HalfplaneConstraint> {
    barrier_evals(state.p, scenario, t)
        .into_iter()
        .map(|eval| {
            let mut b = -alpha * eval.h;
            if include_obstacle_velocity {
                b += eval.grad.dot(eval.c_dot);
            }
            HalfplaneConstraint {
                a: eval.grad,
                b,
                obstacle_id: eval.obstacle_id,
            }
        })
        .collect()
}

/// `build_constraints_opts` with the moving-obstacle term enabled.
pub fn build_constraints(
    state: &RobotState,
    scenario: &ScenarioSpec,
    alpha: f64,
    t: f64,
) -> Vec<HalfplaneConstraint> {
    build_constraints_opts(state, scenario, alpha, t, true)
}

fn satisfied(c: &HalfplaneConstraint, u: Vec2) -> bool {
    c.a.dot(u) >= c.b - FEASIBILITY_TOL
}

fn all_satisfied(constraints: &[&HalfplaneConstraint], u: Vec2, v_max: f64) -> bool {
    u.norm() <= v_max + FEASIBILITY_TOL && constraints.iter().all(|c| satisfied(c, u))
}

/// Projection of `u` onto the boundary line a . x = b.
fn line_projection(u: Vec2, c: &HalfplaneConstraint) -> Vec2 {
    u + c.a * ((c.b - c.a.dot(u)) / c.a.norm_sq())
}

/// Intersection points of the line a . x = b with the circle ||x|| = radius.
fn line_circle_points(c: &HalfplaneConstraint, radius: f64) -> Vec<Vec2> {
    let a_norm_sq = c.a.norm_sq();
    let foot = c.a * (c.b / a_norm_sq);
    let chord_half_sq = radius * radius - foot.norm_sq();
    if chord_half_sq < 0.0 {
        return vec![];
    }
    let along = c.a.perp() * (chord_half_sq.sqrt() / a_norm_sq.sqrt());
    vec![foot + along, foot - along]
}

/// Exact minimizer of 1/2||u - u_nom||^2 over the given halfplanes
/// intersected with the v_max ball, or None when that set is empty.
fn project_onto(
    u_nom: Vec2,
    constraints: &[&HalfplaneConstraint],
    v_max: f64,
) -> Option<(Vec2, f64)> {
    // The unconstrained optimum short-circuits: this also guarantees exact
    // idempotence when u_nom is already feasible.
    if all_satisfied(constraints, u_nom, v_max) {
        return Some((u_nom, 0.0));
    }

    let mut candidates: Vec<Vec2> = Vec::with_capacity(4 * constraints.len() + 2);
    let nom_norm = u_nom.norm();
    if nom_norm > 0.0 {
        candidates.push(u_nom * (v_max / nom_norm));
    }
    for (i, ci) in constraints.iter().enumerate() {
        candidates.push(line_projection(u_nom, ci));
        candidates.extend(line_circle_points(ci, v_max));
        for cj in &constraints[i + 1..] {
            let det = ci.a.x * cj.a.y - ci.a.y * cj.a.x;
            if det.abs() <= 1e-12 * ci.a.norm() * cj.a.norm() {
                continue;
            }
            candidates.push(Vec2::new(
                (ci.b * cj.a.y - cj.b * ci.a.y) / det,
                (ci.a.x * cj.b - cj.a.x * ci.b) / det,
            ));
        }
    }

    let mut best: Option<(Vec2, f64)> = None;
    for u in candidates {
        if !all_satisfied(constraints, u, v_max) {
            continue;
        }
        let obj = 0.5 * (u - u_nom).norm_sq();
        if best.map_or(true, |(_, b)| obj < b) {
            best = Some((u, obj));
        }
    }
    best
}

/// Worst normalized violation (m/s) over all constraints and the speed ball.
fn residual_at(u: Vec2, constraints: &[HalfplaneConstraint], v_max: f64) -> f64 {
    let mut worst = (u.norm() - v_max).max(0.0);
    for c in constraints {
        let a_norm = c.a.norm();
        if a_norm > 0.0 {
            worst = worst.max((c.b - c.a.dot(u)) / a_norm);
        } else if c.b > 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst.max(0.0)
}

/// Solve the safety QP.
///
/// Constraints with a zero normal are vacuous when b <= 0 and are dropped;
/// a zero normal with b > 0 admits no control at all and forces the
/// infeasible fallback. When the feasible set is empty the filter returns
/// `feasible = false` with the minimally-unsafe fallback: the projection of
/// u_nom onto the most-violated single halfplane within the speed ball if
/// that set is nonempty, else a full stop.
pub fn solve_safety_qp(
    u_nom: Vec2,
    constraints: &[HalfplaneConstraint],
    v_max: f64,
) -> Result<FilterResult, QpError> {
    if !u_nom.is_finite() || !v_max.is_finite() {
        return Err(QpError::NonFiniteInput);
    }
    if v_max <= 0.0 {
        return Err(QpError::NonPositiveSpeedBound);
    }
    let mut impossible = false;
    let mut live: Vec<&HalfplaneConstraint> = Vec::with_capacity(constraints.len());
    for c in constraints {
        if !c.a.is_finite() || !c.b.is_finite() {
            return Err(QpError::NonFiniteInput);
        }
        if c.a == Vec2::ZERO {
            impossible |= c.b > 0.0;
        } else {
            live.push(c);
        }
    }

    let solution = if impossible {
        None
    } else {
        project_onto(u_nom, &live, v_max)
    };

    let (u_safe, feasible) = match solution {
        Some((u, _)) => (u, true),
        None => {
            let most_violated = live.iter().copied().max_by(|x, y| {
                let vx = (x.b - x.a.dot(u_nom)) / x.a.norm();
                let vy = (y.b - y.a.dot(u_nom)) / y.a.norm();
                vx.total_cmp(&vy)
            });
            let fallback = most_violated
                .and_then(|c| project_onto(u_nom, &[c], v_max))
                .map(|(u, _)| u)
                .unwrap_or(Vec2::ZERO);
            (fallback, false)
        }
    };

    // Keep the reported control inside the ball to the tighter output bound.
    let norm = u_safe.norm();
    let u_safe = if norm > v_max {
        u_safe * (v_max / norm)
    } else {
        u_safe
    };

    let active_set = live
        .iter()
        .filter(|c| (c.a.dot(u_safe) - c.b).abs() <= 1e-6 * (1.0 + c.a.norm() * v_max))
        .map(|c| c.obstacle_id)
        .collect();

    Ok(FilterResult {
        u_safe,
        active_set,
        feasible,
        qp_residual: residual_at(u_safe, constraints, v_max),
    })
}

/// Convert a world-frame velocity command into differential-drive commands.
///
/// The forward speed is gated by cos of the heading error so the robot does
/// not translate while badly misaligned; commands are clipped to the bounds.
pub fn world_to_diffdrive(
    u_safe: Vec2,
    psi: f64,
    v_max: f64,
    omega_max: f64,
    k_heading: f64,
) -> (f64, f64) {
    let speed = u_safe.norm();
    if speed < 1e-6 {
        return (0.0, 0.0);
    }
    let heading_error = wrap_angle(u_safe.y.atan2(u_safe.x) - psi);
    let omega = (k_heading * heading_error).clamp(-omega_max, omega_max);
    let v = (speed * heading_error.cos().max(0.0)).clamp(0.0, v_max);
    (v, omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn hp(a: Vec2, b: f64) -> HalfplaneConstraint {
        HalfplaneConstraint {
            a,
            b,
            obstacle_id: 0,
        }
    }

    #[test]
    fn barrier_value_matches_hand_arithmetic() {
        assert_eq!(
            barrier_value(Vec2::ZERO, Vec2::new(5.0, 0.0), 0.75),
            24.4375
        );
        assert_relative_eq!(
            barrier_value(Vec2::new(0.75, 0.0), Vec2::ZERO, 0.75),
            0.0,
            epsilon = 1e-12
        );
        assert_eq!(barrier_value(Vec2::ZERO, Vec2::ZERO, 0.75), -0.5625);
    }

    #[test]
    fn nominal_control_caps_speed() {
        assert_eq!(
            nominal_control(Vec2::ZERO, Vec2::new(9.0, 0.0), 0.5),
            Vec2::new(0.5, 0.0)
        );
        assert_eq!(nominal_control(Vec2::ZERO, Vec2::ZERO, 0.5), Vec2::ZERO);
        // Within the cap the raw goal vector passes through unscaled.
        assert_eq!(
            nominal_control(Vec2::ZERO, Vec2::new(0.2, 0.0), 0.5),
            Vec2::new(0.2, 0.0)
        );
    }

    fn one_obstacle_scenario(c_dot: Vec2) -> ScenarioSpec {
        use crate::world::{MotionLaw, ObstacleSpec};
        let motion = if c_dot == Vec2::ZERO {
            MotionLaw::Static {
                at: Vec2::new(5.0, 0.0),
            }
        } else {
            MotionLaw::ConstantVelocity {
                origin: Vec2::new(5.0, 0.0),
                velocity: c_dot,
            }
        };
        ScenarioSpec {
            name: "test".into(),
            start: Vec2::ZERO,
            start_heading: 0.0,
            goal: Vec2::new(9.0, 0.0),
            obstacles: vec![ObstacleSpec {
                id: 0,
                radius: 0.4,
                height: 0.6,
                motion,
            }],
            robot_radius: 0.30,
            padding: 0.05,
            v_max: 0.5,
            omega_max: 0.9,
            dt: 1.0 / 60.0,
            max_steps: 1800,
            goal_tolerance: 0.30,
        }
    }

    #[test]
    fn constraints_linearize_the_barrier_condition() {
        let sc = one_obstacle_scenario(Vec2::ZERO);
        let state = RobotState::at_rest(Vec2::new(4.0, 0.0), 0.0);
        let cs = build_constraints(&state, &sc, 0.3, 0.0);
        assert_eq!(cs.len(), 1);
        assert_relative_eq!(cs[0].a.x, -2.0, epsilon = 1e-12);
        assert_relative_eq!(cs[0].a.y, 0.0);
        assert_relative_eq!(cs[0].b, -0.13125, epsilon = 1e-12);

        // Larger alpha with h > 0 loosens the bound.
        let loose = build_constraints(&state, &sc, 10.0, 0.0);
        assert!(loose[0].b < cs[0].b);
    }

    #[test]
    fn constraints_include_obstacle_velocity_term() {
        let sc = one_obstacle_scenario(Vec2::new(-0.35, 0.0));
        let state = RobotState::at_rest(Vec2::new(4.0, 0.0), 0.0);
        let cs = build_constraints(&state, &sc, 0.3, 0.0);
        assert_relative_eq!(cs[0].b, 0.56875, epsilon = 1e-12);

        let positional = build_constraints_opts(&state, &sc, 0.3, 0.0, false);
        assert_relative_eq!(positional[0].b, -0.13125, epsilon = 1e-12);
    }

    #[test]
    fn unconstrained_optimum_passes_through() {
        let res = solve_safety_qp(Vec2::new(0.3, 0.1), &[], 1.0).unwrap();
        assert_eq!(res.u_safe, Vec2::new(0.3, 0.1));
        assert!(res.feasible);
        assert!(res.active_set.is_empty());
        assert_eq!(res.qp_residual, 0.0);
    }

    #[test]
    fn single_halfplane_projects_orthogonally() {
        let res = solve_safety_qp(Vec2::new(0.5, 0.0), &[hp(Vec2::new(0.0, 1.0), 0.2)], 1.0)
            .unwrap();
        assert_relative_eq!(res.u_safe.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(res.u_safe.y, 0.2, epsilon = 1e-12);
        assert!(res.feasible);
        assert_eq!(res.active_set, vec![0]);
    }

    #[test]
    fn single_halfplane_matches_grid_oracle() {
        let u_nom = Vec2::new(0.5, 0.0);
        let cs = [hp(Vec2::new(0.0, 1.0), 0.2)];
        let res = solve_safety_qp(u_nom, &cs, 1.0).unwrap();
        let grid_best = grid_minimum(u_nom, &cs, 1.0, 1e-3).unwrap();
        let obj = 0.5 * (res.u_safe - u_nom).norm_sq();
        assert!(obj <= grid_best + 1e-4);
    }

    #[test]
    fn halfplane_disjoint_from_ball_is_infeasible() {
        let res = solve_safety_qp(Vec2::new(0.1, 0.0), &[hp(Vec2::new(1.0, 0.0), 2.0)], 1.0)
            .unwrap();
        assert!(!res.feasible);
        assert_eq!(res.u_safe, Vec2::ZERO);
        assert!(res.qp_residual > 0.0);
    }

    #[test]
    fn infeasible_pair_falls_back_to_most_violated_halfplane() {
        // u_y >= 0.4 and u_y <= -0.4 cannot both hold; the second is more
        // violated at u_nom so the fallback satisfies it.
        let cs = [
            hp(Vec2::new(0.0, 1.0), 0.4),
            hp(Vec2::new(0.0, -1.0), 0.4),
        ];
        let res = solve_safety_qp(Vec2::new(0.0, 0.3), &cs, 1.0).unwrap();
        assert!(!res.feasible);
        assert!(satisfied(&cs[1], res.u_safe));
        assert!(res.u_safe.norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn degenerate_zero_normal_handling() {
        // Vacuous when b <= 0.
        let ok = solve_safety_qp(Vec2::new(0.2, 0.0), &[hp(Vec2::ZERO, -1.0)], 1.0).unwrap();
        assert!(ok.feasible);
        assert_eq!(ok.u_safe, Vec2::new(0.2, 0.0));
        // Unsatisfiable when b > 0.
        let bad = solve_safety_qp(Vec2::new(0.2, 0.0), &[hp(Vec2::ZERO, 0.5)], 1.0).unwrap();
        assert!(!bad.feasible);
        assert_eq!(bad.u_safe, Vec2::ZERO);
    }

    #[test]
    fn rejects_non_finite_input() {
        assert_eq!(
            solve_safety_qp(Vec2::new(f64::NAN, 0.0), &[], 1.0),
            Err(QpError::NonFiniteInput)
        );
        assert_eq!(
            solve_safety_qp(Vec2::ZERO, &[hp(Vec2::new(1.0, f64::INFINITY), 0.0)], 1.0),
            Err(QpError::NonFiniteInput)
        );
    }

    #[test]
    fn diffdrive_conversion() {
        let (v, omega) = world_to_diffdrive(Vec2::new(0.5, 0.0), 0.0, 0.5, 0.9, 2.0);
        assert_relative_eq!(v, 0.5);
        assert_relative_eq!(omega, 0.0);

        // Perpendicular target: turn in place at the rate limit.
        let (v, omega) = world_to_diffdrive(Vec2::new(0.0, 0.5), 0.0, 0.5, 0.9, 2.0);
        assert!(v.abs() < 1e-12);
        assert_relative_eq!(omega, 0.9);

        assert_eq!(world_to_diffdrive(Vec2::ZERO, 1.0, 0.5, 0.9, 2.0), (0.0, 0.0));
    }

    #[test]
    fn deviation_shrinks_as_alpha_grows() {
        let sc = one_obstacle_scenario(Vec2::ZERO);
        let state = RobotState::at_rest(Vec2::new(4.0, 0.0), 0.0);
        let u_nom = nominal_control(state.p, sc.goal, sc.v_max);
        let mut last = f64::INFINITY;
        for i in 1..=12 {
            let alpha = 0.05 * i as f64;
            let cs = build_constraints(&state, &sc, alpha, 0.0);
            let res = solve_safety_qp(u_nom, &cs, sc.v_max).unwrap();
            let dev = (res.u_safe - u_nom).norm();
            assert!(dev <= last + 1e-12, "deviation grew at alpha={alpha}");
            last = dev;
        }
    }

    /// Brute-force reference: minimum objective over a feasibility-filtered
    /// grid on the disk. Independent of the candidate enumeration above.
    fn grid_minimum(
        u_nom: Vec2,
        constraints: &[HalfplaneConstraint],
        v_max: f64,
        step: f64,
    ) -> Option<f64> {
        let n = (v_max / step).ceil() as i64;
        let mut best: Option<f64> = None;
        for iy in -n..=n {
            let y = iy as f64 * step;
            for ix in -n..=n {
                let x = ix as f64 * step;
                if x * x + y * y > v_max * v_max {
                    continue;
                }
                let u = Vec2::new(x, y);
                if constraints.iter().any(|c| c.a.dot(u) < c.b) {
                    continue;
                }
                let obj = 0.5 * (u - u_nom).norm_sq();
                if best.map_or(true, |b| obj < b) {
                    best = Some(obj);
                }
            }
        }
        best
    }

    #[test]
    fn randomized_instances_match_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let v_max = 1.0;
        for _ in 0..60 {
            let u_nom = loop {
                let u = Vec2::new(
                    rng.random_range(-v_max..v_max),
                    rng.random_range(-v_max..v_max),
                );
                if u.norm() <= v_max {
                    break u;
                }
            };
            let n_constraints = rng.random_range(0..=4);
            let constraints: Vec<HalfplaneConstraint> = (0..n_constraints)
                .map(|i| {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    HalfplaneConstraint {
                        a: Vec2::new(theta.cos(), theta.sin()),
                        b: rng.random_range(-1.2..1.2),
                        obstacle_id: i,
                    }
                })
                .collect();

            let res = solve_safety_qp(u_nom, &constraints, v_max).unwrap();
            let grid = grid_minimum(u_nom, &constraints, v_max, 2e-3);
            if res.feasible {
                assert!(res.u_safe.norm() <= v_max + 1e-9);
                for c in &constraints {
                    assert!(satisfied(c, res.u_safe));
                }
                if let Some(grid_obj) = grid {
                    let obj = 0.5 * (res.u_safe - u_nom).norm_sq();
                    assert!(obj <= grid_obj + 1e-4, "solver worse than grid");
                }
            } else {
                // The solver only reports infeasible when the grid agrees.
                assert!(grid.is_none());
            }
        }
    }

    proptest! {
        #[test]
        fn feasible_when_unconstrained_direction_exists(
            ux in -0.5f64..0.5, uy in -0.5f64..0.5,
            theta in 0.0f64..(2.0 * PI), b in -0.4f64..0.4,
        ) {
            let u_nom = Vec2::new(ux, uy);
            let cs = [hp(Vec2::new(theta.cos(), theta.sin()), b)];
            let res = solve_safety_qp(u_nom, &cs, 0.5).unwrap();
            // b <= 0.4 < v_max so a single halfplane always intersects the ball.
            prop_assert!(res.feasible);
            prop_assert!(res.u_safe.norm() <= 0.5 + 1e-9);
            prop_assert!(satisfied(&cs[0], res.u_safe));
        }

        #[test]
        fn idempotent_on_feasible_nominal(
            ux in -0.3f64..0.3, uy in -0.3f64..0.3,
            theta in 0.0f64..(2.0 * PI),
        ) {
            let u_nom = Vec2::new(ux, uy);
            let a = Vec2::new(theta.cos(), theta.sin());
            // Constraint built to be satisfied at u_nom by a margin.
            let cs = [hp(a, a.dot(u_nom) - 0.05)];
            let res = solve_safety_qp(u_nom, &cs, 0.5).unwrap();
            prop_assert_eq!(res.u_safe, u_nom);
        }

        #[test]
        fn barrier_gradient_matches_finite_difference(
            px in -5.0f64..5.0, py in -5.0f64..5.0,
            cx in -5.0f64..5.0, cy in -5.0f64..5.0,
        ) {
            let p = Vec2::new(px, py);
            let c = Vec2::new(cx, cy);
            let eps = 1e-6;
            let grad = (p - c) * 2.0;
            let fd_x = (barrier_value(p + Vec2::new(eps, 0.0), c, 0.75)
                - barrier_value(p - Vec2::new(eps, 0.0), c, 0.75)) / (2.0 * eps);
            let fd_y = (barrier_value(p + Vec2::new(0.0, eps), c, 0.75)
                - barrier_value(p - Vec2::new(0.0, eps), c, 0.75)) / (2.0 * eps);
            prop_assert!((fd_x - grad.x).abs() < 1e-6);
            prop_assert!((fd_y - grad.y).abs() < 1e-6);
        }
    }
}

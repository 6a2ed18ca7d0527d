//! The conservativeness pipeline: risk-to-alpha mapping, the geometric
//! speed-aware cap in soft and hard modes, staleness detection, and the
//! fusion rule that produces the alpha actually handed to the safety filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// All pipeline constants. Serialized with these exact field names in the
/// harness config JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlphaPolicyConfig {
    /// Most conservative alpha the risk map can produce, 1/s.
    pub alpha_min: f64,
    /// Most aggressive alpha the risk map can produce, 1/s.
    pub alpha_max: f64,
    /// Risk-map exponent.
    pub gamma: f64,
    /// Clearance considered "safely far", meters.
    pub m_safe: f64,
    /// Near-obstacle cap floor in normal operation, 1/s.
    pub alpha_near_soft: f64,
    /// Near-obstacle cap floor in the stale fallback, 1/s.
    pub alpha_near_hard: f64,
    /// Cap value when safely far, 1/s.
    pub alpha_far: f64,
    /// Cap interpolation exponent.
    pub gamma_c: f64,
    /// Speed-scaling gain.
    pub g_v: f64,
    /// Speed normalizer for the scaling factor, m/s.
    pub v_cap_ref: f64,
    /// Estimates older than this are stale, seconds.
    pub t_stale: f64,
    /// Risk-query cadence in control steps.
    pub query_period_steps: u32,
}

impl Default for AlphaPolicyConfig {
    fn default() -> Self {
        AlphaPolicyConfig {
            alpha_min: 0.1,
            alpha_max: 0.6,
            gamma: 2.0,
            m_safe: 2.0,
            alpha_near_soft: 0.20,
            alpha_near_hard: 0.10,
            alpha_far: 0.6,
            gamma_c: 2.0,
            g_v: 1.0,
            v_cap_ref: 0.50,
            t_stale: 1.0,
            query_period_steps: 30,
        }
    }
}

#[derive(Debug, Error)]
#[error("alpha policy config: {0}")]
pub struct AlphaConfigError(String);

impl AlphaPolicyConfig {
    pub fn validate(&self) -> Result<(), AlphaConfigError> {
        let fail = |msg: &str| Err(AlphaConfigError(msg.into()));
        let finite = [
            self.alpha_min,
            self.alpha_max,
            self.gamma,
            self.m_safe,
            self.alpha_near_soft,
            self.alpha_near_hard,
            self.alpha_far,
            self.gamma_c,
            self.g_v,
            self.v_cap_ref,
            self.t_stale,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return fail("non-finite value");
        }
        if !(0.0 < self.alpha_min && self.alpha_min < self.alpha_max) {
            return fail("need 0 < alpha_min < alpha_max");
        }
        if self.gamma <= 0.0 {
            return fail("gamma must be positive");
        }
        if self.m_safe <= 0.0 {
            return fail("m_safe must be positive");
        }
        if !(self.alpha_near_hard < self.alpha_near_soft
            && self.alpha_near_soft <= self.alpha_far)
        {
            return fail("need alpha_near_hard < alpha_near_soft <= alpha_far");
        }
        if self.alpha_near_hard <= 0.0 {
            return fail("alpha_near_hard must be positive");
        }
        if self.gamma_c <= 0.0 {
            return fail("gamma_c must be positive");
        }
        if self.g_v < 0.0 {
            return fail("g_v must be non-negative");
        }
        if self.v_cap_ref <= 0.0 {
            return fail("v_cap_ref must be positive");
        }
        if self.t_stale <= 0.0 {
            return fail("t_stale must be positive");
        }
        if self.query_period_steps == 0 {
            return fail("query_period_steps must be at least 1");
        }
        // The cap ceiling may not exceed the risk-map ceiling; the fused
        // alpha must stay inside [_, alpha_max].
        if self.alpha_far > self.alpha_max {
            return fail("alpha_far must not exceed alpha_max");
        }
        Ok(())
    }
}

/// Which near-obstacle floor the cap uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapMode {
    Soft,
    Hard,
}

/// Which rule produced `alpha_final`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    /// Fresh estimate, min-fused with the soft cap.
    VlmCapped,
    /// Cap disabled; raw risk-mapped alpha (or alpha_max before any arrives).
    VlmUncapped,
    /// Stale estimate; hard cap in force.
    HardCapFallback,
    /// No estimate has ever arrived; hard cap in force.
    NoEstimateFallback,
}

/// One fused decision, with everything observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaDecision {
    pub alpha_vlm: Option<f64>,
    pub alpha_cap_soft: f64,
    pub alpha_cap_hard: f64,
    pub stale: bool,
    pub alpha_final: f64,
    pub source: AlphaSource,
}

/// Map a bounded risk score to alpha:
/// alpha_min + (alpha_max - alpha_min) (1 - r)^gamma.
///
/// Callers clip upstream; a score outside [0,1] here is a programming error.
pub fn risk_to_alpha(r: f64, cfg: &AlphaPolicyConfig) -> f64 {
    assert!(
        (0.0..=1.0).contains(&r),
        "risk {r} outside [0,1]; clip before mapping"
    );
    cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * (1.0 - r).powf(cfg.gamma)
}

/// Distance-interpolated cap between `alpha_near` and `alpha_far`.
/// Penetration (m < 0) saturates at the near floor.
pub fn distance_cap(m: f64, cfg: &AlphaPolicyConfig, alpha_near: f64) -> f64 {
    let s = (m.max(0.0) / cfg.m_safe).min(1.0);
    alpha_near + (cfg.alpha_far - alpha_near) * s.powf(cfg.gamma_c)
}

/// Speed scaling eta(v) = 1 / (1 + g_v max(0,v)/v_cap_ref), in (0, 1].
pub fn speed_scale(v: f64, cfg: &AlphaPolicyConfig) -> f64 {
    1.0 / (1.0 + cfg.g_v * (v.max(0.0) / cfg.v_cap_ref))
}

/// The final dynamic cap: clip(alpha_dist * eta(v), alpha_near, alpha_far).
pub fn dynamic_cap(m: f64, v: f64, mode: CapMode, cfg: &AlphaPolicyConfig) -> f64 {
    let alpha_near = match mode {
        CapMode::Soft => cfg.alpha_near_soft,
        CapMode::Hard => cfg.alpha_near_hard,
    };
    (distance_cap(m, cfg, alpha_near) * speed_scale(v, cfg)).clamp(alpha_near, cfg.alpha_far)
}

/// Staleness test. An estimate is stale strictly beyond t_stale; no estimate
/// at all counts as stale.
pub fn is_stale(t: f64, t_vlm: Option<f64>, cfg: &AlphaPolicyConfig) -> bool {
    match t_vlm {
        None => true,
        Some(t_vlm) => t - t_vlm > cfg.t_stale,
    }
}

/// Fuse the risk-mapped alpha with the geometric caps.
///
/// Fresh: alpha_final = min(alpha_vlm, soft cap). Stale or never-received:
/// alpha_final = hard cap. With `cap_enabled = false` (ablation) the raw
/// risk-mapped value is used whenever one exists, alpha_max before that.
pub fn fuse_alpha(
    alpha_vlm: Option<f64>,
    m: f64,
    v: f64,
    t: f64,
    t_vlm: Option<f64>,
    cfg: &AlphaPolicyConfig,
    cap_enabled: bool,
) -> AlphaDecision {
    let alpha_cap_soft = dynamic_cap(m, v, CapMode::Soft, cfg);
    let alpha_cap_hard = dynamic_cap(m, v, CapMode::Hard, cfg);
    let stale = is_stale(t, t_vlm, cfg);

    let (alpha_final, source) = if !cap_enabled {
        (alpha_vlm.unwrap_or(cfg.alpha_max), AlphaSource::VlmUncapped)
    } else {
        match (stale, alpha_vlm) {
            (false, Some(a)) => (a.min(alpha_cap_soft), AlphaSource::VlmCapped),
            (_, None) => (alpha_cap_hard, AlphaSource::NoEstimateFallback),
            (true, Some(_)) => (alpha_cap_hard, AlphaSource::HardCapFallback),
        }
    };

    AlphaDecision {
        alpha_vlm,
        alpha_cap_soft,
        alpha_cap_hard,
        stale,
        alpha_final,
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> AlphaPolicyConfig {
        AlphaPolicyConfig::default()
    }

    #[test]
    fn default_config_is_valid() {
        cfg().validate().unwrap();
    }

    #[test]
    fn config_rejects_inverted_floors_and_ceilings() {
        let mut c = cfg();
        c.alpha_near_hard = 0.3;
        assert!(c.validate().is_err());

        let mut c = cfg();
        c.alpha_far = 0.7; // above alpha_max
        assert!(c.validate().is_err());

        let mut c = cfg();
        c.alpha_min = 0.6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn risk_map_hits_exact_endpoints() {
        let c = cfg();
        assert_eq!(risk_to_alpha(0.0, &c), c.alpha_max);
        assert_eq!(risk_to_alpha(1.0, &c), c.alpha_min);
        assert_relative_eq!(risk_to_alpha(0.5, &c), 0.225, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "outside [0,1]")]
    fn risk_map_rejects_out_of_range() {
        risk_to_alpha(1.5, &cfg());
    }

    #[test]
    fn distance_cap_endpoints_and_midpoint() {
        let c = cfg();
        assert_eq!(distance_cap(0.0, &c, c.alpha_near_soft), c.alpha_near_soft);
        assert_eq!(distance_cap(c.m_safe, &c, c.alpha_near_soft), c.alpha_far);
        assert_eq!(distance_cap(50.0, &c, c.alpha_near_soft), c.alpha_far);
        // Penetration behaves like contact.
        assert_eq!(distance_cap(-0.3, &c, c.alpha_near_hard), c.alpha_near_hard);
        // s = 0.5, s^2 = 0.25.
        assert_relative_eq!(
            distance_cap(c.m_safe / 2.0, &c, c.alpha_near_soft),
            c.alpha_near_soft + 0.25 * (c.alpha_far - c.alpha_near_soft),
            epsilon = 1e-12
        );
    }

    #[test]
    fn speed_scale_endpoints() {
        let c = cfg();
        assert_eq!(speed_scale(0.0, &c), 1.0);
        assert_eq!(speed_scale(c.v_cap_ref, &c), 0.5);
        assert_eq!(speed_scale(-0.2, &c), 1.0);
    }

    #[test]
    fn dynamic_cap_saturations() {
        let c = cfg();
        assert_eq!(dynamic_cap(0.0, 0.3, CapMode::Soft, &c), c.alpha_near_soft);
        assert_eq!(dynamic_cap(0.0, 0.3, CapMode::Hard, &c), c.alpha_near_hard);
        assert_eq!(dynamic_cap(5.0, 0.0, CapMode::Soft, &c), c.alpha_far);
        // Far but fast: 0.6 * 0.5 clipped into [0.2, 0.6].
        assert_relative_eq!(
            dynamic_cap(5.0, c.v_cap_ref, CapMode::Soft, &c),
            0.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn staleness_is_a_strict_threshold() {
        let c = cfg();
        assert!(!is_stale(2.0, Some(2.0), &c));
        assert!(!is_stale(3.0, Some(2.0), &c)); // exactly t_stale old
        assert!(is_stale(3.0 + 1e-9, Some(2.0), &c));
        assert!(is_stale(0.0, None, &c));
    }

    #[test]
    fn fusion_min_rule_when_fresh() {
        let c = cfg();
        // Cap binds.
        let d = fuse_alpha(Some(0.5), 0.5, 0.0, 1.0, Some(1.0), &c, true);
        assert!(!d.stale);
        assert_eq!(d.source, AlphaSource::VlmCapped);
        assert_eq!(d.alpha_final, d.alpha_cap_soft.min(0.5));
        assert!(d.alpha_final <= d.alpha_cap_soft);

        // Risk estimate already conservative.
        let d = fuse_alpha(Some(0.15), 5.0, 0.0, 1.0, Some(1.0), &c, true);
        assert_eq!(d.alpha_final, 0.15);
    }

    #[test]
    fn fusion_falls_back_when_stale_or_missing() {
        let c = cfg();
        let d = fuse_alpha(Some(0.6), 0.1, 0.0, 5.0, Some(1.0), &c, true);
        assert!(d.stale);
        assert_eq!(d.source, AlphaSource::HardCapFallback);
        assert_eq!(d.alpha_final, d.alpha_cap_hard);

        let d = fuse_alpha(None, 0.1, 0.0, 5.0, None, &c, true);
        assert_eq!(d.source, AlphaSource::NoEstimateFallback);
        assert_eq!(d.alpha_final, d.alpha_cap_hard);
    }

    #[test]
    fn uncapped_ablation_ignores_staleness() {
        let c = cfg();
        let d = fuse_alpha(Some(0.6), 0.1, 0.4, 9.0, Some(1.0), &c, false);
        assert_eq!(d.source, AlphaSource::VlmUncapped);
        assert_eq!(d.alpha_final, 0.6);

        let d = fuse_alpha(None, 0.1, 0.4, 9.0, None, &c, false);
        assert_eq!(d.alpha_final, c.alpha_max);
    }

    proptest! {
        #[test]
        fn risk_map_is_strictly_decreasing(r1 in 0.0f64..1.0, dr in 1e-6f64..1.0) {
            let c = cfg();
            let r2 = (r1 + dr).min(1.0);
            prop_assume!(r2 > r1);
            prop_assert!(risk_to_alpha(r1, &c) > risk_to_alpha(r2, &c));
            let a = risk_to_alpha(r1, &c);
            prop_assert!((c.alpha_min..=c.alpha_max).contains(&a));
        }

        #[test]
        fn cap_is_monotone_and_bounded(
            m1 in -1.0f64..6.0, dm in 0.0f64..6.0,
            v1 in -0.5f64..1.0, dv in 0.0f64..1.0,
        ) {
            let c = cfg();
            for mode in [CapMode::Soft, CapMode::Hard] {
                let near = match mode {
                    CapMode::Soft => c.alpha_near_soft,
                    CapMode::Hard => c.alpha_near_hard,
                };
                // Non-decreasing in clearance.
                prop_assert!(dynamic_cap(m1 + dm, v1, mode, &c) >= dynamic_cap(m1, v1, mode, &c) - 1e-12);
                // Non-increasing in speed.
                prop_assert!(dynamic_cap(m1, v1 + dv, mode, &c) <= dynamic_cap(m1, v1, mode, &c) + 1e-12);
                let cap = dynamic_cap(m1, v1, mode, &c);
                prop_assert!((near..=c.alpha_far).contains(&cap));
            }
            // Hard mode never exceeds soft mode.
            prop_assert!(
                dynamic_cap(m1, v1, CapMode::Hard, &c)
                    <= dynamic_cap(m1, v1, CapMode::Soft, &c) + 1e-12
            );
        }

        #[test]
        fn fresh_fusion_never_exceeds_soft_cap(
            r in 0.0f64..1.0, m in -0.5f64..5.0, v in 0.0f64..0.6,
        ) {
            let c = cfg();
            let alpha_vlm = risk_to_alpha(r, &c);
            let d = fuse_alpha(Some(alpha_vlm), m, v, 1.0, Some(0.8), &c, true);
            prop_assert!(!d.stale);
            prop_assert!(d.alpha_final <= d.alpha_cap_soft);
            // Everything stays inside the configured hull.
            prop_assert!(d.alpha_final >= c.alpha_near_hard.min(c.alpha_min));
            prop_assert!(d.alpha_final <= c.alpha_far.max(c.alpha_max));
        }

        #[test]
        fn stale_fusion_is_independent_of_the_estimate(
            a1 in 0.1f64..0.6, a2 in 0.1f64..0.6,
            m in -0.5f64..5.0, v in 0.0f64..0.6,
        ) {
            let c = cfg();
            let d1 = fuse_alpha(Some(a1), m, v, 10.0, Some(1.0), &c, true);
            let d2 = fuse_alpha(Some(a2), m, v, 10.0, Some(1.0), &c, true);
            prop_assert!(d1.stale && d2.stale);
            prop_assert_eq!(d1.alpha_final, d2.alpha_final);
        }
    }
}

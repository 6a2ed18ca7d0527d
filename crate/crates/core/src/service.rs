//! The risk endpoint: pluggable risk providers, latency injection, the
//! instruction constants, and the conservative response parser.
//!
//! The service is deliberately model-free. The `Oracle` provider computes a
//! ground-truth hazard score from scene geometry; `Scripted` replays a file;
//! `Noisy` corrupts another provider; `Passthrough` forwards to a real
//! vision-language endpoint with the instruction constants prepended.

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alpha::AlphaPolicyConfig;
use crate::world::SceneSnapshot;

/// Base instruction prepended by the service when forwarding to a real
/// vision-language endpoint.
pub const SERVER_INSTRUCTION: &str = "You are a risk estimator for mobile robot navigation. \
Given this scene image, output ONLY a single-line JSON of the form \
{\"risk\": <number between 0 and 1>}. No prose, no markdown\u{2014}just JSON.";

/// Default blend weights for the oracle provider.
pub const ORACLE_DISTANCE_WEIGHT: f64 = 0.7;
pub const ORACLE_CLOSING_WEIGHT: f64 = 0.3;

/// Shape parameter used when a log-normal latency is specified by mean only.
pub const DEFAULT_LOGNORMAL_SIGMA: f64 = 0.25;

/// One risk query as carried on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRequest {
    pub image_png_base64: Option<String>,
    pub scene: Option<SceneSnapshot>,
    pub context: String,
    pub request_id: u64,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("provider config: {0}")]
    Config(String),
    #[error("scripted replay file {path}: {source}")]
    ScriptLoad {
        path: String,
        source: std::io::Error,
    },
    #[error("scripted replay file {0}: line {1} is not a number")]
    ScriptParse(String, usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseRiskError {
    #[error("no extractable risk value in response body")]
    NoRiskFound,
}

/// Provider configuration, serializable into the harness config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskProviderSpec {
    Oracle {
        #[serde(default = "default_w_d")]
        w_d: f64,
        #[serde(default = "default_w_v")]
        w_v: f64,
    },
    Scripted {
        path: PathBuf,
    },
    Noisy {
        base: Box<RiskProviderSpec>,
        outlier_prob: f64,
        outlier_value: f64,
        gaussian_sigma: f64,
        #[serde(default)]
        rng_seed: u64,
    },
    Passthrough {
        upstream_url: String,
    },
}

fn default_w_d() -> f64 {
    ORACLE_DISTANCE_WEIGHT
}

fn default_w_v() -> f64 {
    ORACLE_CLOSING_WEIGHT
}

impl RiskProviderSpec {
    pub fn oracle() -> Self {
        RiskProviderSpec::Oracle {
            w_d: ORACLE_DISTANCE_WEIGHT,
            w_v: ORACLE_CLOSING_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        match self {
            RiskProviderSpec::Oracle { w_d, w_v } => {
                if !(w_d.is_finite() && w_v.is_finite() && *w_d >= 0.0 && *w_v >= 0.0) {
                    return Err(ServiceError::Config(
                        "oracle weights must be non-negative and finite".into(),
                    ));
                }
            }
            RiskProviderSpec::Scripted { path } => {
                if path.as_os_str().is_empty() {
                    return Err(ServiceError::Config("scripted path is empty".into()));
                }
            }
            RiskProviderSpec::Noisy {
                base,
                outlier_prob,
                outlier_value,
                gaussian_sigma,
                ..
            } => {
                if !(0.0..=1.0).contains(outlier_prob) {
                    return Err(ServiceError::Config("outlier_prob must be in [0,1]".into()));
                }
                if !(0.0..=1.0).contains(outlier_value) {
                    return Err(ServiceError::Config("outlier_value must be in [0,1]".into()));
                }
                if !(*gaussian_sigma >= 0.0 && gaussian_sigma.is_finite()) {
                    return Err(ServiceError::Config(
                        "gaussian_sigma must be non-negative".into(),
                    ));
                }
                base.validate()?;
            }
            RiskProviderSpec::Passthrough { upstream_url } => {
                if upstream_url.is_empty() {
                    return Err(ServiceError::Config("upstream_url is empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Materialize the provider. `episode_seed` is mixed into every random
    /// stream so distinct episodes draw distinct noise while staying
    /// reproducible.
    pub fn instantiate(&self, episode_seed: u64) -> Result<ProviderState, ServiceError> {
        self.validate()?;
        Ok(match self {
            RiskProviderSpec::Oracle { w_d, w_v } => ProviderState::Oracle {
                w_d: *w_d,
                w_v: *w_v,
            },
            RiskProviderSpec::Scripted { path } => {
                let text =
                    std::fs::read_to_string(path).map_err(|source| ServiceError::ScriptLoad {
                        path: path.display().to_string(),
                        source,
                    })?;
                let mut values = Vec::new();
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() {
                        continue;
                    }
                    let v: f64 = line.parse().map_err(|_| {
                        ServiceError::ScriptParse(path.display().to_string(), i + 1)
                    })?;
                    values.push(v.clamp(0.0, 1.0));
                }
                ProviderState::Scripted { values, cursor: 0 }
            }
            RiskProviderSpec::Noisy {
                base,
                outlier_prob,
                outlier_value,
                gaussian_sigma,
                rng_seed,
            } => ProviderState::Noisy {
                base: Box::new(base.instantiate(episode_seed)?),
                outlier_prob: *outlier_prob,
                outlier_value: *outlier_value,
                gaussian_sigma: *gaussian_sigma,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(*rng_seed, episode_seed, 0x4e4f4953)),
            },
            RiskProviderSpec::Passthrough { upstream_url } => ProviderState::Passthrough {
                upstream_url: upstream_url.clone(),
            },
        })
    }
}

/// Runtime provider state. Only `Scripted` and `Noisy` carry mutable state,
/// which the serving layer serializes.
#[derive(Debug)]
pub enum ProviderState {
    Oracle {
        w_d: f64,
        w_v: f64,
    },
    Scripted {
        values: Vec<f64>,
        cursor: usize,
    },
    Noisy {
        base: Box<ProviderState>,
        outlier_prob: f64,
        outlier_value: f64,
        gaussian_sigma: f64,
        rng: ChaCha8Rng,
    },
    Passthrough {
        upstream_url: String,
    },
}

/// Why a request could not be served, mapped to a wire status.
#[derive(Debug, Clone, PartialEq)]
pub enum ServeFailure {
    /// Wire status 400.
    BadRequest(String),
    /// Wire status 503.
    Unavailable(String),
}

impl ProviderState {
    fn eval(
        &mut self,
        request: &RiskRequest,
        cfg: &AlphaPolicyConfig,
    ) -> Result<f64, ServeFailure> {
        match self {
            ProviderState::Oracle { w_d, w_v } => {
                let scene = request.scene.as_ref().ok_or_else(|| {
                    ServeFailure::BadRequest("oracle provider requires a scene".into())
                })?;
                Ok(oracle_risk(scene, cfg, *w_d, *w_v))
            }
            ProviderState::Scripted { values, cursor } => {
                let v = values.get(*cursor).copied().ok_or_else(|| {
                    ServeFailure::Unavailable("scripted replay exhausted".into())
                })?;
                *cursor += 1;
                Ok(v)
            }
            ProviderState::Noisy {
                base,
                outlier_prob,
                outlier_value,
                gaussian_sigma,
                rng,
            } => {
                let r = base.eval(request, cfg)?;
                let r = if rng.random::<f64>() < *outlier_prob {
                    *outlier_value
                } else if *gaussian_sigma > 0.0 {
                    let noise = Normal::new(0.0, *gaussian_sigma).unwrap().sample(rng);
                    r + noise
                } else {
                    r
                };
                Ok(r.clamp(0.0, 1.0))
            }
            ProviderState::Passthrough { upstream_url } => {
                let instruction = format!("{SERVER_INSTRUCTION}\n\n{}", request.context);
                let upstream_body = serde_json::json!({
                    "instruction": instruction,
                    "image_png_base64": request.image_png_base64,
                    "scene": request.scene,
                    "request_id": request.request_id,
                })
                .to_string();
                let mut response = ureq::post(upstream_url.as_str())
                    .header("content-type", "application/json")
                    .send(upstream_body.as_str())
                    .map_err(|e| ServeFailure::Unavailable(format!("upstream: {e}")))?;
                let text = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| ServeFailure::Unavailable(format!("upstream body: {e}")))?;
                parse_risk_response(&text)
                    .map_err(|_| ServeFailure::Unavailable("upstream returned no risk".into()))
            }
        }
    }
}

/// Ground-truth hazard proxy from scene geometry: a proximity term from the
/// clearance margin blended with the normalized closing speed toward the
/// nearest obstacle, clipped to [0,1]. An empty scene scores zero.
pub fn oracle_risk(scene: &SceneSnapshot, cfg: &AlphaPolicyConfig, w_d: f64, w_v: f64) -> f64 {
    if scene.obstacles.is_empty() {
        return 0.0;
    }
    let p = scene.robot.p;
    let nearest = scene
        .obstacles
        .iter()
        .min_by(|a, b| {
            let da = (p - a.center).norm() - a.radius;
            let db = (p - b.center).norm() - b.radius;
            da.total_cmp(&db).then(a.id.cmp(&b.id))
        })
        .expect("non-empty obstacle list");
    let offset = p - nearest.center;
    let dist = offset.norm();
    let closing = if dist > 1e-9 {
        let margin_rate = offset.dot(scene.robot.world_velocity() - nearest.velocity) / dist;
        (-margin_rate).max(0.0) / cfg.v_cap_ref
    } else {
        1.0
    };
    let proximity = 1.0 - (scene.margin / cfg.m_safe).min(1.0);
    (w_d * proximity + w_v * closing).clamp(0.0, 1.0)
}

fn risk_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"["']?risk["']?\s*:\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(%)?"#)
            .expect("static pattern")
    })
}

/// Conservative extraction of a risk value from arbitrary model output.
///
/// The last `"risk": <number>` pair wins, tolerating prose, markdown fences,
/// pretty-printing, and percent signs. Percentages and percent-style bare
/// numbers in (2, 100] are rescaled by 1/100; everything is clipped to
/// [0, 1]. Values in (1, 2] are treated as malformed probabilities and clip
/// to 1 rather than rescale.
pub fn parse_risk_response(body: &str) -> Result<f64, ParseRiskError> {
    let mut result = Err(ParseRiskError::NoRiskFound);
    for caps in risk_pattern().captures_iter(body) {
        if let Ok(value) = caps[1].parse::<f64>() {
            result = Ok(normalize_risk(value, caps.get(2).is_some()));
        }
    }
    result
}

fn normalize_risk(value: f64, percent: bool) -> f64 {
    let v = if percent {
        value / 100.0
    } else if value > 100.0 {
        1.0
    } else if value > 2.0 {
        value / 100.0
    } else {
        value
    };
    v.clamp(0.0, 1.0)
}

/// Latency model applied to every response before delivery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    #[serde(flatten)]
    pub kind: LatencyKind,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyKind {
    Zero,
    Fixed { d: f64 },
    Uniform { lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl LatencySpec {
    pub fn zero() -> Self {
        LatencySpec {
            kind: LatencyKind::Zero,
            rng_seed: 0,
        }
    }

    pub fn fixed(d: f64) -> Self {
        LatencySpec {
            kind: LatencyKind::Fixed { d },
            rng_seed: 0,
        }
    }

    /// Log-normal latency parameterized by its mean: mu = ln(mean) - sigma^2/2.
    pub fn log_normal_with_mean(mean: f64, sigma: f64) -> Self {
        LatencySpec {
            kind: LatencyKind::LogNormal {
                mu: mean.ln() - 0.5 * sigma * sigma,
                sigma,
            },
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let ok = match self.kind {
            LatencyKind::Zero => true,
            LatencyKind::Fixed { d } => d >= 0.0 && d.is_finite(),
            LatencyKind::Uniform { lo, hi } => {
                lo >= 0.0 && lo <= hi && lo.is_finite() && hi.is_finite()
            }
            LatencyKind::LogNormal { mu, sigma } => mu.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ServiceError::Config("invalid latency spec".into()))
        }
    }

    pub fn sampler(&self, episode_seed: u64) -> LatencySampler {
        LatencySampler {
            kind: self.kind,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(
                self.rng_seed,
                episode_seed,
                0x4c415445,
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencySampler {
    kind: LatencyKind,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    pub fn sample(&mut self) -> f64 {
        match self.kind {
            LatencyKind::Zero => 0.0,
            LatencyKind::Fixed { d } => d,
            LatencyKind::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    self.rng.random_range(lo..hi)
                }
            }
            LatencyKind::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).unwrap().sample(&mut self.rng)
            }
        }
    }
}

/// splitmix64; used to derive independent seeded streams.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a configured seed, the episode seed, and a stream tag into one seed.
pub fn derive_seed(base: u64, episode_seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(episode_seed)) ^ stream)
}

/// Everything one service instance owns.
#[derive(Debug)]
pub struct ServiceState {
    pub provider: ProviderState,
    pub latency: LatencySampler,
    pub alpha_cfg: AlphaPolicyConfig,
}

impl ServiceState {
    pub fn new(
        provider: &RiskProviderSpec,
        latency: &LatencySpec,
        alpha_cfg: AlphaPolicyConfig,
        episode_seed: u64,
    ) -> Result<Self, ServiceError> {
        latency.validate()?;
        Ok(ServiceState {
            provider: provider.instantiate(episode_seed)?,
            latency: latency.sampler(episode_seed),
            alpha_cfg,
        })
    }
}

/// A served response: wire status, exact body, and the latency to apply
/// before delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeReply {
    pub status: u16,
    pub body: String,
    pub delay: f64,
}

/// Serve one request. The body of a success is exactly one line,
/// `{"risk": <value>}` at four decimals.
pub fn serve_risk(request: &RiskRequest, state: &mut ServiceState) -> ServeReply {
    let delay = state.latency.sample();
    if request.image_png_base64.is_none() && request.scene.is_none() {
        return ServeReply {
            status: 400,
            body: error_body("request carries neither an image nor a scene"),
            delay,
        };
    }
    match state.provider.eval(request, &state.alpha_cfg) {
        Ok(r) => ServeReply {
            status: 200,
            body: format!("{{\"risk\": {r:.4}}}"),
            delay,
        },
        Err(ServeFailure::BadRequest(msg)) => ServeReply {
            status: 400,
            body: error_body(&msg),
            delay,
        },
        Err(ServeFailure::Unavailable(msg)) => ServeReply {
            status: 503,
            body: error_body(&msg),
            delay,
        },
    }
}

fn error_body(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

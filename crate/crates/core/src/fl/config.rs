use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::client::Optimizer;
use super::task::TaskConfig;
use crate::accountant::{default_orders, effective_rate, epsilon_for, required_sigma};
use crate::dp::Adjacency;
use crate::error::{Error, Result};
use crate::factorize::DEFAULT_ITERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    FedLoRA,
    FfaLoRA,
    FedPower,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::FedLoRA => "fedlora",
            Protocol::FfaLoRA => "ffalora",
            Protocol::FedPower => "fedpower",
        }
    }

    /// Values uploaded by one client per round for an `m×n` weight at rank `r`.
    pub fn upload_values(&self, m: usize, n: usize, r: usize) -> u64 {
        match self {
            Protocol::FfaLoRA => (m * r) as u64,
            Protocol::FedLoRA | Protocol::FedPower => (m * r + r * n) as u64,
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedlora" => Ok(Protocol::FedLoRA),
            "ffalora" => Ok(Protocol::FfaLoRA),
            "fedpower" => Ok(Protocol::FedPower),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected fedlora, ffalora, fedpower)"
            ))),
        }
    }
}

fn default_iters() -> usize {
    DEFAULT_ITERS
}
fn default_frequency() -> usize {
    1
}
fn default_delta() -> f64 {
    1e-5
}
fn default_bits() -> u32 {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub name: Protocol,
    pub r: usize,
    #[serde(default = "default_iters")]
    pub k: usize,
    /// FedPower refactorizes on rounds where `t % refactor_frequency == 0`.
    #[serde(default = "default_frequency")]
    pub refactor_frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(alias = "T")]
    pub rounds: usize,
    #[serde(alias = "L")]
    pub local_rounds: usize,
    pub eta: f64,
    pub q_c: f64,
    pub q_s: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Std of the Gaussian initialization of `A⁰`; defaults to `1/√n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// Target budget; σ is then derived by the accountant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Frobenius clip threshold; absent means no clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default)]
    pub adjacency: Adjacency,
    /// Explicit noise multiplier; mutually exclusive with `epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub tight_sensitivity: bool,
}

impl PrivacyConfig {
    pub fn non_private() -> Self {
        Self {
            epsilon: None,
            delta: default_delta(),
            clip: None,
            adjacency: Adjacency::Sample,
            sigma: None,
            tight_sensitivity: false,
        }
    }
}

/// Complete description of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLRunConfig {
    pub task: TaskConfig,
    pub protocol: ProtocolConfig,
    pub training: TrainingConfig,
    pub privacy: PrivacyConfig,
    #[serde(default = "default_bits")]
    pub bits_per_value: u32,
    /// Seeds used by sweeps; a single run uses `task.seed`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Noise actually used by a run and what the accountant certifies for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPrivacy {
    pub sigma: f64,
    pub clip: Option<f64>,
    /// Per-round sampling probability used for accounting.
    pub accounting_rate: f64,
    /// `None` for runs without noise (unbounded loss).
    pub certified_epsilon: Option<f64>,
    pub delta: f64,
}

impl FLRunConfig {
    pub fn clients_per_round(&self) -> usize {
        let n = self.task.clients;
        ((self.training.q_c * n as f64).ceil() as usize).clamp(1, n)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        let t = &self.training;
        if !(t.q_c > 0.0 && t.q_c <= 1.0) {
            return fail(format!("q_c must lie in (0,1], got {}", t.q_c));
        }
        if !(t.q_s > 0.0 && t.q_s <= 1.0) {
            return fail(format!("q_s must lie in (0,1], got {}", t.q_s));
        }
        if !(t.eta >= 0.0) || !t.eta.is_finite() {
            return fail(format!("eta must be finite and >= 0, got {}", t.eta));
        }
        if let Some(s) = t.init_std {
            if !(s >= 0.0) || !s.is_finite() {
                return fail(format!("init_std must be finite and >= 0, got {s}"));
            }
        }
        let p = &self.protocol;
        if p.r == 0 || p.r > self.task.m.min(self.task.n) {
            return fail(format!(
                "rank {} invalid for a {}x{} weight",
                p.r, self.task.m, self.task.n
            ));
        }
        if p.k == 0 {
            return fail("need at least one power iteration".into());
        }
        if p.refactor_frequency == 0 {
            return fail("refactor_frequency must be >= 1".into());
        }
        if self.bits_per_value == 0 {
            return fail("bits_per_value must be positive".into());
        }
        let pr = &self.privacy;
        if pr.epsilon.is_some() && pr.sigma.is_some() {
            return fail("privacy section sets both epsilon and sigma; choose one".into());
        }
        if !(pr.delta > 0.0 && pr.delta < 1.0) {
            return fail(format!("delta must lie in (0,1), got {}", pr.delta));
        }
        if let Some(c) = pr.clip {
            if !(c > 0.0) || !c.is_finite() {
                return fail(format!("clip must be finite and > 0, got {c}"));
            }
        }
        if let Some(e) = pr.epsilon {
            if !(e > 0.0) {
                return fail(format!("epsilon must be > 0, got {e}"));
            }
        }
        if let Some(s) = pr.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return fail(format!("sigma must be finite and >= 0, got {s}"));
            }
        }
        let noisy = pr.epsilon.is_some() || pr.sigma.is_some_and(|s| s > 0.0);
        if noisy && pr.clip.is_none() {
            return fail("a private run needs a clip threshold".into());
        }
        Ok(())
    }

    /// Per-round sampling probability the accountant should use.
    pub fn accounting_rate(&self) -> f64 {
        let q_c = self.clients_per_round() as f64 / self.task.clients as f64;
        effective_rate(self.privacy.adjacency, q_c, self.training.q_s)
    }

    /// Derives σ from ε (or certifies ε for an explicit σ).
    pub fn resolve_privacy(&self) -> Result<ResolvedPrivacy> {
        self.validate()?;
        let pr = &self.privacy;
        let q = self.accounting_rate();
        let steps = self.training.rounds as u64;
        let orders = default_orders();
        let sigma = match (pr.epsilon, pr.sigma) {
            (Some(_), _) if steps == 0 => 0.0,
            (Some(eps), _) => required_sigma(eps, pr.delta, q, steps, &orders)?,
            (None, Some(s)) => s,
            (None, None) => 0.0,
        };
        let certified_epsilon = if steps == 0 {
            Some(0.0)
        } else if sigma > 0.0 {
            Some(epsilon_for(sigma, q, steps, pr.delta, &orders)?)
        } else {
            None
        };
        Ok(ResolvedPrivacy {
            sigma,
            clip: pr.clip,
            accounting_rate: q,
            certified_epsilon,
            delta: pr.delta,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

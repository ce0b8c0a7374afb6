//! Scenario files: TOML in, validated config out.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sentinel::SentinelConfig;
use crate::topology::LinkParams;
use crate::traffic::{AttackConfig, BenignConfig};
use crate::victim::ServerConfig;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    /// Quiet lead-in before any attack; the sentinel learns baselines here.
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    pub protection_enabled: bool,
    /// Detect and log, but never push rules to the switch.
    #[serde(default)]
    pub sentinel_observe_only: bool,
    /// Expire switch rules after this long; unset means rules stay forever.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_timeout_s: Option<f64>,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub benign: BenignConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub thresholds: SentinelConfig,
}

fn default_warmup() -> f64 {
    15.0
}

#[derive(Error, Debug)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.duration_s <= 0.0 {
            return fail(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.warmup_s < 0.0 {
            return fail(format!("warmup_s must not be negative, got {}", self.warmup_s));
        }
        if self.benign.client_count < self.benign.bad_network_clients {
            return fail(format!(
                "bad_network_clients ({}) exceeds client_count ({})",
                self.benign.bad_network_clients, self.benign.client_count
            ));
        }
        if self.benign.request_interval_s <= 0.0 {
            return fail("request_interval_s must be positive".into());
        }
        if let Some(t) = self.rule_timeout_s {
            if t <= 0.0 {
                return fail("rule_timeout_s must be positive when set".into());
            }
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if a.start_s < 0.0 || a.duration_s < 0.0 {
                return fail(format!("attack {i}: start_s and duration_s must not be negative"));
            }
            if a.start_s < self.warmup_s {
                return fail(format!(
                    "attack {i} starts at {}s, inside the {}s warmup",
                    a.start_s, self.warmup_s
                ));
            }
            if a.start_s + a.duration_s > self.duration_s {
                return fail(format!(
                    "attack {i} runs past the end of the scenario ({} + {} > {})",
                    a.start_s, a.duration_s, self.duration_s
                ));
            }
            if a.is_flooding() && a.rate_pps <= 0.0 && a.duration_s > 0.0 {
                return fail(format!("attack {i}: flooding kinds need rate_pps > 0"));
            }
            if a.source_count == 0 {
                return fail(format!("attack {i}: source_count must be at least 1"));
            }
            if a.source_count > 4096 {
                return fail(format!("attack {i}: source_count is capped at 4096"));
            }
            if !a.is_flooding() {
                if a.connections_per_source == 0 {
                    return fail(format!("attack {i}: slow kinds need connections_per_source > 0"));
                }
                if a.slow_interval_s <= 0.0 {
                    return fail(format!("attack {i}: slow_interval_s must be positive"));
                }
            }
            if !(0.0..1.0).contains(&a.jitter_fraction) {
                return fail(format!("attack {i}: jitter_fraction must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

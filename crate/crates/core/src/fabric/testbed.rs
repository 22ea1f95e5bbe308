//! Testbed configuration files and registry construction.
//!
//! Testbeds are TOML (or JSON) documents with one `[[resource]]` table per
//! resource:
//!
//! ```toml
//! [[resource]]
//! id = "monash-linux"
//! nodes = 60
//! speed = 1.0                      # or node_speeds = [1.0, 1.2, ...]
//! price = 2                        # or a full [resource.pricing] table
//! availability = [{ from = 0, until = 3600, fraction = 0.5 }]
//! failures = [{ at = 1800, duration = 600 }]   # optional `node = 3`
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AvailabilityWindow, FailureScope, FailureSpec, Resource};
use crate::model::{GridDollars, ResourceId, Secs};
use crate::trading::PricePolicy;

/// The shipped six-resource testbed.
pub const WWG_TESTBED: &str = include_str!("../../../../testbeds/wwg.testbed");

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ConfigError {
    #[error("testbed parse error: {0}")]
    Parse(String),
    #[error("testbed defines no resources")]
    Empty,
    #[error("resource `{0}`: {1}")]
    Invalid(String, String),
    #[error("duplicate resource id `{0}`")]
    Duplicate(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureConfig {
    pub at: Secs,
    pub duration: Secs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub id: String,
    #[serde(default)]
    pub organization: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub nodes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_speeds: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<GridDollars>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<PricePolicy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub availability: Vec<AvailabilityWindow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    #[serde(default, rename = "resource")]
    pub resources: Vec<ResourceConfig>,
}

impl TestbedConfig {
    /// Parses TOML, or JSON when the document starts with `{`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let trimmed = text.trim_start();
        let cfg: TestbedConfig = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        if cfg.resources.is_empty() {
            return Err(ConfigError::Empty);
        }
        Ok(cfg)
    }

    pub fn wwg() -> Self {
        TestbedConfig::parse(WWG_TESTBED).expect("shipped testbed parses")
    }

    pub fn build(&self) -> Result<Vec<Resource>, ConfigError> {
        if self.resources.is_empty() {
            return Err(ConfigError::Empty);
        }
        let mut seen = BTreeSet::new();
        self.resources
            .iter()
            .map(|rc| {
                if !seen.insert(rc.id.clone()) {
                    return Err(ConfigError::Duplicate(rc.id.clone()));
                }
                rc.build()
            })
            .collect()
    }
}

impl ResourceConfig {
    fn build(&self) -> Result<Resource, ConfigError> {
        let invalid = |msg: &str| ConfigError::Invalid(self.id.clone(), msg.to_string());
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.nodes == 0 {
            return Err(invalid("node count must be positive"));
        }
        let speed_factors = match (&self.node_speeds, self.speed) {
            (Some(_), Some(_)) => return Err(invalid("give either `speed` or `node_speeds`")),
            (Some(v), None) => {
                if v.len() != self.nodes as usize {
                    return Err(invalid("`node_speeds` length differs from `nodes`"));
                }
                v.clone()
            }
            (None, s) => vec![s.unwrap_or(1.0); self.nodes as usize],
        };
        if speed_factors.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(invalid("speed factors must be positive"));
        }
        let price = match (&self.pricing, self.price) {
            (Some(_), Some(_)) => return Err(invalid("give either `price` or `pricing`")),
            (Some(p), None) => p.clone(),
            (None, Some(p)) => PricePolicy::commodity(p),
            (None, None) => return Err(invalid("missing `price`")),
        };
        price.validate().map_err(|e| invalid(&e.to_string()))?;
        for w in &self.availability {
            if !(0.0..=1.0).contains(&w.fraction) || w.from >= w.until {
                return Err(invalid("availability windows need from < until and a fraction in [0, 1]"));
            }
        }
        let failures = self
            .failures
            .iter()
            .map(|f| {
                let scope = match f.node {
                    Some(n) if n >= self.nodes => return Err(invalid("failure node out of range")),
                    Some(n) => FailureScope::Node(n),
                    None => FailureScope::Resource,
                };
                Ok(FailureSpec {
                    at: f.at,
                    duration: f.duration,
                    scope,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Resource {
            id: ResourceId::new(&self.id),
            organization: self.organization.clone(),
            node_count: self.nodes,
            speed_factors,
            price,
            availability: self.availability.clone(),
            failures,
        })
    }
}

/// Parses a testbed document and builds its registry.
pub fn build_wwg(config: &str) -> Result<Vec<Resource>, ConfigError> {
    TestbedConfig::parse(config)?.build()
}

//! Agent configuration, read from TOML.
//!
//! ```toml
//! host_id = "ws-17"
//! home_nets = ["10.0.0.0/8"]
//! collector_addr = "127.0.0.1:5140"
//! admin_addr = "127.0.0.1:5141"     # optional
//! overlap_policy = "first-wins"     # or "last-wins"
//! drop_enabled = false
//! buffer_cap = 1048576
//!
//! [sampler]
//! lambda = 0.9
//! window = 8
//! ```

use std::net::SocketAddr;
use std::path::Path;

use ipnet::IpNet;
use serde::Deserialize;
use thiserror::Error;

use crate::detection::EngineOptions;
use crate::reassembly::{OverlapPolicy, DEFAULT_BUFFER_CAP};
use crate::sampler::{SamplerConfig, SamplerConfigError};
use crate::wire::MAX_ID_LEN;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub host_id: String,
    pub home_nets: Vec<IpNet>,
    pub collector_addr: SocketAddr,
    pub admin_addr: Option<SocketAddr>,
    pub overlap_policy: OverlapPolicy,
    pub drop_enabled: bool,
    pub buffer_cap: usize,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("config [sampler]: {0}")]
    Sampler(#[from] SamplerConfigError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    host_id: String,
    home_nets: Vec<String>,
    collector_addr: String,
    admin_addr: Option<String>,
    #[serde(default)]
    overlap_policy: Option<String>,
    #[serde(default)]
    drop_enabled: bool,
    buffer_cap: Option<usize>,
    #[serde(default)]
    sampler: SamplerConfig,
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

fn parse_addr(key: &'static str, s: &str) -> Result<SocketAddr, ConfigError> {
    s.parse().map_err(|_| invalid(key, format!("`{s}` is not ip:port")))
}

impl AgentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        if raw.host_id.is_empty() || raw.host_id.len() > MAX_ID_LEN {
            return Err(invalid("host_id", format!("must be 1..={MAX_ID_LEN} bytes")));
        }
        if raw.host_id.chars().any(char::is_whitespace) {
            return Err(invalid("host_id", "must not contain whitespace"));
        }
        if raw.home_nets.is_empty() {
            return Err(invalid("home_nets", "must list at least one network"));
        }
        let home_nets = raw
            .home_nets
            .iter()
            .map(|s| s.parse::<IpNet>().map_err(|_| invalid("home_nets", format!("`{s}` is not a CIDR block"))))
            .collect::<Result<Vec<_>, _>>()?;
        let overlap_policy = match raw.overlap_policy {
            None => OverlapPolicy::default(),
            Some(s) => s.parse().map_err(|_| invalid("overlap_policy", format!("unknown policy `{s}`")))?,
        };
        let buffer_cap = raw.buffer_cap.unwrap_or(DEFAULT_BUFFER_CAP);
        if buffer_cap == 0 {
            return Err(invalid("buffer_cap", "must be positive"));
        }
        raw.sampler.validate()?;
        Ok(AgentConfig {
            host_id: raw.host_id,
            home_nets,
            collector_addr: parse_addr("collector_addr", &raw.collector_addr)?,
            admin_addr: raw.admin_addr.as_deref().map(|s| parse_addr("admin_addr", s)).transpose()?,
            overlap_policy,
            drop_enabled: raw.drop_enabled,
            buffer_cap,
            sampler: raw.sampler,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            host_id: self.host_id.clone(),
            overlap_policy: self.overlap_policy,
            buffer_cap: self.buffer_cap,
            drop_enabled: self.drop_enabled,
        }
    }
}

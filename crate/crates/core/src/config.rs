//! Scenario configuration, read from TOML. See `docs/config.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{Latency, DEFAULT_MTU};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSetting {
    Transport,
    Tunnel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolSetting {
    Esp,
    Ah,
}

/// How EC keys travel in token requests, tokens and RS Information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyForm {
    Certificate,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub loss: f64,
    /// Either a number of milliseconds or `{ min = .., max = .. }`.
    pub latency_ms: Latency,
    pub reorder: bool,
    pub mtu: usize,
    /// Fixed UDP ports per node name; unlisted nodes use ephemeral ports.
    pub udp_ports: BTreeMap<String, u16>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            loss: 0.0,
            latency_ms: Latency::Fixed(10),
            reorder: false,
            mtu: DEFAULT_MTU,
            udp_ports: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiPoolConfig {
    pub start: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsConfig {
    pub name: String,
    pub token_lifetime_s: u64,
    pub spi_pool: Option<SpiPoolConfig>,
    pub key_form: KeyForm,
    pub cert_validity_s: u64,
}

impl Default for AsConfig {
    fn default() -> Self {
        AsConfig {
            name: "as.example".into(),
            token_lifetime_s: 3600,
            spi_pool: None,
            key_form: KeyForm::Certificate,
            cert_validity_s: 365 * 86_400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsConfig {
    pub name: String,
    pub introspection: bool,
    /// Return SA-C SPIs to the AS pool when their SA expires.
    pub release_spis: bool,
    pub replay_window: u32,
    pub sa_lifetime_s: u64,
    pub mode: ModeSetting,
    pub protocol: ProtocolSetting,
    pub tunnel_src: Option<String>,
    pub tunnel_dst: Option<String>,
    /// Resource path to value.
    pub resources: BTreeMap<String, String>,
}

impl Default for RsConfig {
    fn default() -> Self {
        RsConfig {
            name: "rs.example".into(),
            introspection: false,
            release_spis: true,
            replay_window: crate::ipsec::DEFAULT_REPLAY_WINDOW,
            sa_lifetime_s: crate::ipsec::DEFAULT_LIFETIME_S,
            mode: ModeSetting::Transport,
            protocol: ProtocolSetting::Esp,
            tunnel_src: None,
            tunnel_dst: None,
            resources: BTreeMap::from([("/temp".into(), "temperature=21.5".into())]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub name: String,
    pub resource: String,
    pub scope: String,
    /// "GET" or "POST".
    pub method: String,
    /// Start with the AS address already known, skipping the probe.
    pub knows_as: bool,
    /// Fresh token requests allowed after the RS reports an SPI collision.
    pub collision_retries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            name: "client-01".into(),
            resource: "/temp".into(),
            scope: "read".into(),
            method: "GET".into(),
            knows_as: false,
            collision_retries: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub client: String,
    pub audience: String,
    pub scopes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetransmitConfig {
    pub initial_ms: u64,
    pub max_retransmits: u32,
}

impl Default for RetransmitConfig {
    fn default() -> Self {
        RetransmitConfig {
            initial_ms: 500,
            max_retransmits: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    /// Unix time at simulated millisecond 0.
    pub base_unix: u64,
    /// A run that has not finished by then fails.
    pub max_run_ms: u64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            base_unix: 1_700_000_000,
            max_run_ms: 120_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub network: NetworkConfig,
    pub authorization_server: AsConfig,
    pub resource_server: RsConfig,
    pub client: ClientConfig,
    pub policy: Vec<PolicyRule>,
    pub retransmit: RetransmitConfig,
    pub time: TimeConfig,
}

impl Default for Config {
    fn default() -> Self {
        let client = ClientConfig::default();
        let rs = RsConfig::default();
        Config {
            policy: vec![PolicyRule {
                client: client.name.clone(),
                audience: rs.name.clone(),
                scopes: vec!["read".into()],
            }],
            network: NetworkConfig::default(),
            authorization_server: AsConfig::default(),
            resource_server: rs,
            client,
            retransmit: RetransmitConfig::default(),
            time: TimeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        let n = &self.network;
        if !(0.0..=1.0).contains(&n.loss) {
            return bad("network.loss must be within [0, 1]");
        }
        if let Latency::Uniform { min, max } = n.latency_ms {
            if min > max {
                return bad("network.latency_ms: min exceeds max");
            }
        }
        if n.mtu < 64 {
            return bad("network.mtu must be at least 64");
        }
        let names = [
            &self.authorization_server.name,
            &self.resource_server.name,
            &self.client.name,
        ];
        if names.iter().any(|s| s.is_empty()) {
            return bad("node names must be non-empty");
        }
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return bad("node names must be distinct");
        }
        let rs = &self.resource_server;
        if !(1..=64).contains(&rs.replay_window) {
            return bad("resource_server.replay_window must be within 1..=64");
        }
        if rs.sa_lifetime_s == 0 || self.authorization_server.token_lifetime_s == 0 {
            return bad("lifetimes must be positive");
        }
        let tunnel = rs.mode == ModeSetting::Tunnel;
        if tunnel != (rs.tunnel_src.is_some() && rs.tunnel_dst.is_some())
            || rs.tunnel_src.is_some() != rs.tunnel_dst.is_some()
        {
            return bad("tunnel_src and tunnel_dst are required exactly in tunnel mode");
        }
        if !rs.resources.contains_key(&self.client.resource) {
            return bad("client.resource is not hosted by the resource server");
        }
        if !matches!(self.client.method.as_str(), "GET" | "POST") {
            return bad("client.method must be GET or POST");
        }
        if let Some(p) = &self.authorization_server.spi_pool {
            if p.size == 0 || p.start == 0 || p.start.checked_add(p.size - 1).is_none() {
                return bad("spi_pool must be a non-empty range of non-zero 32-bit values");
            }
        }
        if self.retransmit.initial_ms == 0 {
            return bad("retransmit.initial_ms must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = Config::default();
        c.validate().unwrap();
        let s = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml(&s).unwrap(), c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = Config::from_toml(
            r#"
            [network]
            loss = 0.1
            latency_ms = { min = 5, max = 20 }

            [authorization_server]
            spi_pool = { start = 4096, size = 4 }
            "#,
        )
        .unwrap();
        assert_eq!(c.network.latency_ms, Latency::Uniform { min: 5, max: 20 });
        assert_eq!(c.resource_server.name, "rs.example");
        assert_eq!(c.authorization_server.spi_pool.unwrap().size, 4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("[network]\nloss = 1.5").is_err());
        assert!(Config::from_toml("[resource_server]\nmode = \"tunnel\"").is_err());
        assert!(Config::from_toml("[resource_server]\nreplay_window = 65").is_err());
        assert!(Config::from_toml("[client]\nresource = \"/nope\"").is_err());
        assert!(Config::from_toml("[network]\nbogus = 1").is_err());
    }
}

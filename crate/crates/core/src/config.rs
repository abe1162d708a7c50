//! Service configuration: a `key=value` file plus two roster files (one
//! line per node, one per device profile).

use crate::gateway::GatewayConfig;
use crate::ids::{is_valid_token, NodeId, ProfileId};
use crate::media::{DeviceProfile, FormatVariantKey};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {msg}")]
    Invalid {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("cannot read {0}: {1}")]
    Io(String, std::io::Error),
}

fn invalid(file: &str, line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        file: file.to_owned(),
        line,
        msg: msg.into(),
    }
}

/// Full service configuration as loaded from disk.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub gateway: GatewayConfig,
    pub listen: String,
    pub node_roster: Option<PathBuf>,
    pub profile_roster: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            gateway: GatewayConfig::default(),
            listen: "127.0.0.1:4680".to_owned(),
            node_roster: None,
            profile_roster: None,
        }
    }
}

/// Parses the `key=value` service config. Blank lines and `#` comments are
/// ignored. Unknown keys are errors so typos do not silently fall back to
/// defaults.
pub fn parse_service_config(text: &str, file: &str) -> Result<ServiceConfig, ConfigError> {
    let mut cfg = ServiceConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid(file, lineno, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_u64 = |v: &str| -> Result<u64, ConfigError> {
            v.parse()
                .map_err(|_| invalid(file, lineno, format!("{key}: not an integer: `{v}`")))
        };
        match key {
            "cache_budget_bytes" => {
                cfg.gateway.cache_budget_bytes = match value {
                    "unbounded" | "none" => None,
                    v => Some(parse_u64(v)?),
                }
            }
            "segment_size_bytes" => {
                let v = parse_u64(value)?;
                if v == 0 || v > u64::from(u32::MAX) {
                    return Err(invalid(file, lineno, "segment_size_bytes out of range"));
                }
                cfg.gateway.segment_size_bytes = v as u32;
            }
            "prefetch_seconds" => cfg.gateway.prefetch_seconds = parse_u64(value)? as u32,
            "telemetry_interval_s" => cfg.gateway.telemetry_interval_s = parse_u64(value)? as u32,
            "telemetry_staleness_s" => cfg.gateway.telemetry_staleness_s = parse_u64(value)? as u32,
            "fetch_timeout_s" => cfg.gateway.fetch_timeout_s = parse_u64(value)? as u32,
            "tick_ms" => {
                let v = parse_u64(value)?;
                if v == 0 || v > 1000 {
                    return Err(invalid(file, lineno, "tick_ms must be in 1..=1000"));
                }
                cfg.gateway.tick_ms = v as u32;
            }
            "rng_seed" => cfg.gateway.rng_seed = parse_u64(value)?,
            "client_bandwidth_kbps" => cfg.gateway.client_bandwidth_kbps = parse_u64(value)?,
            "pace_cap_kbps" => cfg.gateway.pace_cap_kbps = Some(parse_u64(value)?),
            "burst" => {
                cfg.gateway.burst = value
                    .parse()
                    .map_err(|_| invalid(file, lineno, "burst: expected true/false"))?
            }
            "cache_dir" => cfg.gateway.cache_dir = Some(PathBuf::from(value)),
            "listen" => cfg.listen = value.to_owned(),
            "node_roster" => cfg.node_roster = Some(PathBuf::from(value)),
            "profile_roster" => cfg.profile_roster = Some(PathBuf::from(value)),
            other => return Err(invalid(file, lineno, format!("unknown key `{other}`"))),
        }
    }
    Ok(cfg)
}

pub fn load_service_config(path: &Path) -> Result<ServiceConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
    parse_service_config(&text, &path.display().to_string())
}

/// One node roster line: `node_id address latency_ms signal_db`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRosterEntry {
    pub node_id: NodeId,
    pub address: String,
    pub latency_ms: u64,
    pub signal_db: i32,
}

pub fn parse_node_roster(text: &str, file: &str) -> Result<Vec<NodeRosterEntry>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, address, latency, signal] = parts[..] else {
            return Err(invalid(
                file,
                lineno,
                "expected: node_id address latency_ms signal_db",
            ));
        };
        if !is_valid_token(id) {
            return Err(invalid(file, lineno, "bad node id"));
        }
        out.push(NodeRosterEntry {
            node_id: NodeId::new(id),
            address: address.to_owned(),
            latency_ms: latency
                .parse()
                .map_err(|_| invalid(file, lineno, "bad latency_ms"))?,
            signal_db: signal
                .parse()
                .map_err(|_| invalid(file, lineno, "bad signal_db"))?,
        });
    }
    Ok(out)
}

/// One profile roster line: `profile_id codec:WxH@max_fps`.
pub fn parse_profile_roster(text: &str, file: &str) -> Result<Vec<DeviceProfile>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, variant] = parts[..] else {
            return Err(invalid(file, lineno, "expected: profile_id codec:WxH@fps"));
        };
        if !is_valid_token(id) {
            return Err(invalid(file, lineno, "bad profile id"));
        }
        let v: FormatVariantKey = variant
            .parse()
            .map_err(|e: String| invalid(file, lineno, e))?;
        let profile = DeviceProfile::new(ProfileId::new(id), v.codec_id, v.width, v.height, v.fps)
            .map_err(|e| invalid(file, lineno, e.to_string()))?;
        out.push(profile);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn service_config_round_trip() {
        let text = "\
# comment
cache_budget_bytes = 1048576
segment_size_bytes = 65536
prefetch_seconds = 3
telemetry_staleness_s = 30
fetch_timeout_s = 7
rng_seed = 42
listen = 0.0.0.0:9000
node_roster = nodes.txt
profile_roster = profiles.txt
burst = true
";
        let cfg = parse_service_config(text, "test.conf").unwrap();
        assert_eq!(cfg.gateway.cache_budget_bytes, Some(1_048_576));
        assert_eq!(cfg.gateway.segment_size_bytes, 65_536);
        assert_eq!(cfg.gateway.prefetch_seconds, 3);
        assert_eq!(cfg.gateway.telemetry_staleness_s, 30);
        assert_eq!(cfg.gateway.fetch_timeout_s, 7);
        assert_eq!(cfg.gateway.rng_seed, 42);
        assert!(cfg.gateway.burst);
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.node_roster.as_deref(), Some(Path::new("nodes.txt")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_service_config("cache_budget=-5\n", "t.conf").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn node_roster_parses() {
        let text = "n1 127.0.0.1:9001 20 -60\nn2 127.0.0.1:9002 35 -55\n";
        let roster = parse_node_roster(text, "nodes.txt").unwrap();
        assert_eq!(roster.len(), 2);
        assert_eq!(roster[0].node_id, NodeId::new("n1"));
        assert_eq!(roster[1].latency_ms, 35);
        assert!(parse_node_roster("n1 addr twenty -60\n", "x").is_err());
    }

    #[test]
    fn profile_roster_parses() {
        let text = "qvga 1:320x240@24\n";
        let profiles = parse_profile_roster(text, "profiles.txt").unwrap();
        assert_eq!(profiles[0].target_width, 320);
        assert_eq!(profiles[0].max_fps, 24);
        // targets above CIF are rejected by profile validation
        assert!(parse_profile_roster("big 1:640x480@30\n", "x").is_err());
    }
}

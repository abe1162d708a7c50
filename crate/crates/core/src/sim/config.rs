//! Simulation configuration: one JSON document.

use super::SimError;
use crate::gateway::GatewayConfig;
use crate::ids::is_valid_token;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u32,
    /// Upper bound for request arrivals; the run continues until every
    /// session settles.
    pub duration_ticks: u64,
    pub client_link_kbps: u64,
    pub nodes: Vec<SimNodeSpec>,
    pub catalog: Vec<VideoSpec>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub service: SimServiceConfig,
    /// Extra device profiles beyond the built-in `cif`/`qcif` presets.
    #[serde(default)]
    pub profiles: Vec<ProfileSpec>,
}

fn default_tick_ms() -> u32 {
    10
}

fn default_storage() -> u64 {
    1 << 32
}

fn default_codec() -> u8 {
    1
}

fn default_exponent_milli() -> u32 {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimNodeSpec {
    pub id: String,
    pub latency_ms: u64,
    pub capacity_kbps: u64,
    pub signal_db: i32,
    #[serde(default = "default_storage")]
    pub storage_bytes: u64,
    pub hosted: Vec<String>,
    /// Fault injection: stop answering range requests after this many
    /// responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_after_responses: Option<u64>,
    /// Fault injection: stop sending telemetry from this tick on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry_stop_tick: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoSpec {
    pub id: String,
    #[serde(default = "default_codec")]
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub fps: u8,
    pub frame_count: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSpec {
    /// Replay this exact trace.
    Fixed { trace: Vec<FixedRequest> },
    /// Rank-r popularity proportional to r^(-exponent); exponent in
    /// thousandths (1000 = the classic 1.0, the default). Zero means
    /// uniform.
    Zipf {
        #[serde(default = "default_exponent_milli")]
        exponent_milli: u32,
        requests: u64,
        inter_arrival_ticks: u64,
        profiles: Vec<ProfileMix>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedRequest {
    pub tick: u64,
    pub video: String,
    pub profile: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileMix {
    pub profile: String,
    pub weight: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub id: String,
    #[serde(default = "default_codec")]
    pub codec_id: u8,
    pub width: u16,
    pub height: u16,
    pub max_fps: u8,
}

/// Gateway knobs as exposed through the sim config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimServiceConfig {
    pub segment_size_bytes: u32,
    pub prefetch_seconds: u32,
    pub fetch_timeout_s: u32,
    pub telemetry_interval_s: u32,
    pub telemetry_staleness_s: u32,
    pub cache_budget_bytes: Option<u64>,
    pub burst: bool,
    pub pace_cap_kbps: Option<u64>,
    /// When set, the cache manifest is loaded before the run and saved
    /// after it, so back-to-back runs model a restart.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SimServiceConfig {
    fn default() -> Self {
        let g = GatewayConfig::default();
        Self {
            segment_size_bytes: g.segment_size_bytes,
            prefetch_seconds: g.prefetch_seconds,
            fetch_timeout_s: g.fetch_timeout_s,
            telemetry_interval_s: g.telemetry_interval_s,
            telemetry_staleness_s: g.telemetry_staleness_s,
            cache_budget_bytes: None,
            burst: false,
            pace_cap_kbps: None,
            cache_dir: None,
        }
    }
}

impl SimConfig {
    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            segment_size_bytes: self.service.segment_size_bytes,
            prefetch_seconds: self.service.prefetch_seconds,
            fetch_timeout_s: self.service.fetch_timeout_s,
            telemetry_interval_s: self.service.telemetry_interval_s,
            telemetry_staleness_s: self.service.telemetry_staleness_s,
            tick_ms: self.tick_ms,
            rng_seed: self.seed,
            client_bandwidth_kbps: self.client_link_kbps,
            pace_cap_kbps: self.service.pace_cap_kbps,
            burst: self.service.burst,
            cache_budget_bytes: self.service.cache_budget_bytes,
            cache_dir: self.service.cache_dir.clone(),
        }
    }

    /// Identifies the workload for report comparison: seed, catalog and
    /// workload must match between A/B runs.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&self.catalog).expect("catalog serializes"));
        h.update(serde_json::to_vec(&self.workload).expect("workload serializes"));
        let digest = h.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::ConfigInvalid(msg));
        if self.tick_ms == 0 || self.tick_ms > 1000 {
            return bad(format!("tick_ms: {} not in 1..=1000", self.tick_ms));
        }
        if self.client_link_kbps == 0 {
            return bad("client_link_kbps: must be positive".into());
        }
        if self.service.segment_size_bytes == 0 {
            return bad("service.segment_size_bytes: must be positive".into());
        }

        let mut videos = BTreeSet::new();
        for v in &self.catalog {
            if !is_valid_token(&v.id) {
                return bad(format!("catalog: bad video id `{}`", v.id));
            }
            if !videos.insert(v.id.as_str()) {
                return bad(format!("catalog: duplicate video id `{}`", v.id));
            }
            if v.width == 0 || v.height == 0 {
                return bad(format!("catalog.{}: zero dimension", v.id));
            }
            if v.fps == 0 {
                return bad(format!("catalog.{}: fps must be >= 1", v.id));
            }
        }

        let mut profile_ids: BTreeSet<&str> = BTreeSet::from(["cif", "qcif"]);
        for p in &self.profiles {
            if !is_valid_token(&p.id) {
                return bad(format!("profiles: bad profile id `{}`", p.id));
            }
            if p.width == 0 || p.height == 0 || p.max_fps == 0 {
                return bad(format!("profiles.{}: zero field", p.id));
            }
            profile_ids.insert(p.id.as_str());
        }

        let mut node_ids = BTreeSet::new();
        for n in &self.nodes {
            if !is_valid_token(&n.id) {
                return bad(format!("nodes: bad node id `{}`", n.id));
            }
            if !node_ids.insert(n.id.as_str()) {
                return bad(format!("nodes: duplicate node id `{}`", n.id));
            }
            if n.capacity_kbps == 0 {
                return bad(format!("nodes.{}: capacity_kbps must be positive", n.id));
            }
            for v in &n.hosted {
                if !videos.contains(v.as_str()) {
                    return bad(format!("nodes.{}: hosts unknown video `{v}`", n.id));
                }
            }
        }

        match &self.workload {
            WorkloadSpec::Fixed { trace } => {
                for (i, r) in trace.iter().enumerate() {
                    if r.tick > self.duration_ticks {
                        return bad(format!(
                            "workload.trace[{i}]: tick {} beyond duration {}",
                            r.tick, self.duration_ticks
                        ));
                    }
                    if !profile_ids.contains(r.profile.as_str()) {
                        return bad(format!(
                            "workload.trace[{i}]: unknown profile `{}`",
                            r.profile
                        ));
                    }
                    // Unknown videos are allowed: they exercise the
                    // not-found path.
                }
            }
            WorkloadSpec::Zipf {
                requests,
                inter_arrival_ticks,
                profiles,
                ..
            } => {
                if *requests > 0 && self.catalog.is_empty() {
                    return bad("workload: zipf over an empty catalog".into());
                }
                if *requests > 0 && profiles.iter().map(|p| u64::from(p.weight)).sum::<u64>() == 0
                {
                    return bad("workload: profile mix weights sum to zero".into());
                }
                for p in profiles {
                    if !profile_ids.contains(p.profile.as_str()) {
                        return bad(format!("workload: unknown profile `{}`", p.profile));
                    }
                }
                let span = requests.saturating_sub(1).saturating_mul(*inter_arrival_ticks);
                if span > self.duration_ticks {
                    return bad(format!(
                        "workload: last arrival at tick {span} beyond duration {}",
                        self.duration_ticks
                    ));
                }
            }
        }
        Ok(())
    }
}

//! Registered origin nodes, their telemetry, and best-node selection.
//!
//! Nodes report channel capacity, available storage and hosted videos at
//! periodic intervals; the registry keeps one record per node and derives a
//! selection key from it. Selection is lexicographic: shortest route time
//! first, then highest channel capacity, then best signal strength; nodes
//! identical on all three are drawn uniformly at random with the caller's
//! seeded generator. Nodes whose telemetry is older than the staleness
//! window never appear in host lookups.

use crate::clock::Tick;
use crate::ids::{NodeId, VideoId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already registered")]
    DuplicateNode(NodeId),
    #[error("stale telemetry for {node}: ts {got} older than {last}")]
    StaleMessage { node: NodeId, got: u64, last: u64 },
    #[error("route probe to {0} timed out")]
    ProbeTimeout(NodeId),
}

/// One registered origin node as last reported.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub address: String,
    pub route_time_ms: u64,
    pub channel_capacity_kbps: u64,
    pub signal_strength_db: i32,
    pub available_storage_bytes: u64,
    pub last_telemetry: Tick,
    /// Set by a failed route probe; cleared by the next telemetry.
    pub forced_stale: bool,
    pub hosted_videos: BTreeSet<VideoId>,
}

impl NodeRecord {
    pub fn score(&self) -> IndexScore {
        IndexScore {
            route_time_ms: self.route_time_ms,
            channel_capacity_kbps: self.channel_capacity_kbps,
            signal_strength_db: self.signal_strength_db,
        }
    }
}

/// Selection key. Ordering is lexicographic with route time ascending,
/// capacity descending, signal descending; the best node is the minimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexScore {
    pub route_time_ms: u64,
    pub channel_capacity_kbps: u64,
    pub signal_strength_db: i32,
}

impl Ord for IndexScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.route_time_ms
            .cmp(&other.route_time_ms)
            .then(other.channel_capacity_kbps.cmp(&self.channel_capacity_kbps))
            .then(other.signal_strength_db.cmp(&self.signal_strength_db))
    }
}

impl PartialOrd for IndexScore {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One periodic node report. `ts` must be monotone non-decreasing per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryMsg {
    pub node_id: NodeId,
    pub ts: u64,
    pub capacity_kbps: u64,
    pub storage_bytes: u64,
    #[serde(default)]
    pub add_videos: Vec<VideoId>,
    #[serde(default)]
    pub remove_videos: Vec<VideoId>,
}

/// Measures the round-trip time to a node address. The simulator answers
/// from configured latency; live mode probes over TCP.
pub trait RouteProber {
    fn probe_rtt_ms(&self, node: &NodeId, address: &str) -> Option<u64>;
}

pub struct NodeRegistry {
    nodes: Mutex<BTreeMap<NodeId, NodeRecord>>,
    staleness_window_ticks: u64,
    stale_dropped: Mutex<u64>,
}

impl NodeRegistry {
    pub fn new(staleness_window_ticks: u64) -> Self {
        Self {
            nodes: Mutex::new(BTreeMap::new()),
            staleness_window_ticks,
            stale_dropped: Mutex::new(0),
        }
    }

    pub fn staleness_window_ticks(&self) -> u64 {
        self.staleness_window_ticks
    }

    /// Count of telemetry messages dropped for being out of order.
    pub fn stale_messages_dropped(&self) -> u64 {
        *self.stale_dropped.lock().unwrap()
    }

    pub fn register(
        &self,
        node_id: NodeId,
        address: String,
        route_time_ms: u64,
        signal_strength_db: i32,
        now: Tick,
    ) -> Result<(), RegistryError> {
        let mut nodes = self.nodes.lock().unwrap();
        if nodes.contains_key(&node_id) {
            return Err(RegistryError::DuplicateNode(node_id));
        }
        nodes.insert(
            node_id.clone(),
            NodeRecord {
                node_id,
                address,
                route_time_ms,
                channel_capacity_kbps: 0,
                signal_strength_db,
                available_storage_bytes: 0,
                last_telemetry: now,
                forced_stale: false,
                hosted_videos: BTreeSet::new(),
            },
        );
        Ok(())
    }

    /// Applies one telemetry report; out-of-order messages are dropped and
    /// counted, leaving the record unchanged.
    pub fn apply_telemetry(&self, msg: &TelemetryMsg) -> Result<(), RegistryError> {
        let mut nodes = self.nodes.lock().unwrap();
        let rec = nodes
            .get_mut(&msg.node_id)
            .ok_or_else(|| RegistryError::UnknownNode(msg.node_id.clone()))?;
        if msg.ts < rec.last_telemetry.0 {
            *self.stale_dropped.lock().unwrap() += 1;
            return Err(RegistryError::StaleMessage {
                node: msg.node_id.clone(),
                got: msg.ts,
                last: rec.last_telemetry.0,
            });
        }
        rec.channel_capacity_kbps = msg.capacity_kbps;
        rec.available_storage_bytes = msg.storage_bytes;
        rec.last_telemetry = Tick(msg.ts);
        rec.forced_stale = false;
        for v in &msg.add_videos {
            rec.hosted_videos.insert(v.clone());
        }
        for v in &msg.remove_videos {
            rec.hosted_videos.remove(v);
        }
        Ok(())
    }

    /// Probes the route to a node and records the RTT. A probe timeout
    /// marks the node stale so selection skips it until telemetry resumes.
    pub fn measure_route(
        &self,
        node_id: &NodeId,
        prober: &dyn RouteProber,
        now: Tick,
    ) -> Result<u64, RegistryError> {
        let address = {
            let nodes = self.nodes.lock().unwrap();
            nodes
                .get(node_id)
                .ok_or_else(|| RegistryError::UnknownNode(node_id.clone()))?
                .address
                .clone()
        };
        match prober.probe_rtt_ms(node_id, &address) {
            Some(rtt) => {
                let mut nodes = self.nodes.lock().unwrap();
                if let Some(rec) = nodes.get_mut(node_id) {
                    rec.route_time_ms = rtt;
                }
                Ok(rtt)
            }
            None => {
                self.mark_stale(node_id, now);
                Err(RegistryError::ProbeTimeout(node_id.clone()))
            }
        }
    }

    /// Forces a node out of selection until its next telemetry.
    pub fn mark_stale(&self, node_id: &NodeId, _now: Tick) {
        let mut nodes = self.nodes.lock().unwrap();
        if let Some(rec) = nodes.get_mut(node_id) {
            rec.forced_stale = true;
        }
    }

    fn is_fresh(&self, rec: &NodeRecord, now: Tick) -> bool {
        !rec.forced_stale && now.saturating_sub(rec.last_telemetry) <= self.staleness_window_ticks
    }

    /// Fresh nodes hosting the given video, in node-id order.
    pub fn find_hosts(&self, video: &VideoId, now: Tick) -> Vec<NodeRecord> {
        let nodes = self.nodes.lock().unwrap();
        nodes
            .values()
            .filter(|r| self.is_fresh(r, now) && r.hosted_videos.contains(video))
            .cloned()
            .collect()
    }

    /// Snapshot of every registered node.
    pub fn list_nodes(&self) -> Vec<NodeRecord> {
        self.nodes.lock().unwrap().values().cloned().collect()
    }
}

/// Picks the best node from a non-empty candidate list: the unique minimum
/// under [`IndexScore`] ordering, with full ties resolved uniformly at
/// random from the supplied generator. The result does not depend on
/// candidate order.
pub fn select_best_node<R: Rng + ?Sized>(candidates: &[NodeRecord], rng: &mut R) -> NodeRecord {
    assert!(!candidates.is_empty(), "select_best_node on empty list");
    let best = candidates.iter().map(NodeRecord::score).min().unwrap();
    let mut tied: Vec<&NodeRecord> = candidates.iter().filter(|c| c.score() == best).collect();
    tied.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    tied.dedup_by(|a, b| a.node_id == b.node_id);
    if tied.len() == 1 {
        return tied[0].clone();
    }
    tied[rng.gen_range(0..tied.len())].clone()
}

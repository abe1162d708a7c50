//! Run reports and A/B comparison.

use super::SimError;
use crate::gateway::HistogramSummary;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    /// Hash of (seed, catalog, workload); compared runs must share it.
    pub fingerprint: String,
    pub no_cache: bool,
    pub requests: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub not_found: u64,
    pub failed: u64,
    pub unfinished: u64,
    pub hit_rate: f64,
    pub origin_bytes: u64,
    pub client_bytes: u64,
    /// Bytes a cacheless gateway would have pulled from origin for the
    /// sessions that completed.
    pub origin_equivalent_bytes: u64,
    pub bandwidth_saved_ratio: f64,
    pub transcode_count: u64,
    pub startup_delay_hit: HistogramSummary,
    pub startup_delay_miss: HistogramSummary,
    pub total_stall_ticks: u64,
    /// Range requests served per node.
    pub per_node_fetches: BTreeMap<String, u64>,
    pub ticks_run: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

/// Per-metric deltas between two runs of the same workload (`a - b`). The
/// headline is `origin_bytes`: against a `--no-cache` baseline it is the
/// bandwidth the cache saved.
pub fn compare_runs(a: &SimReport, b: &SimReport) -> Result<Vec<CompareRow>, SimError> {
    if a.fingerprint != b.fingerprint {
        return Err(SimError::MismatchedConfigs(format!(
            "fingerprint {} vs {}",
            a.fingerprint, b.fingerprint
        )));
    }
    let rows = [
        ("requests", a.requests as f64, b.requests as f64),
        ("cache_hits", a.cache_hits as f64, b.cache_hits as f64),
        ("hit_rate", a.hit_rate, b.hit_rate),
        ("origin_bytes", a.origin_bytes as f64, b.origin_bytes as f64),
        ("client_bytes", a.client_bytes as f64, b.client_bytes as f64),
        (
            "bandwidth_saved_ratio",
            a.bandwidth_saved_ratio,
            b.bandwidth_saved_ratio,
        ),
        (
            "startup_delay_hit_median",
            a.startup_delay_hit.median,
            b.startup_delay_hit.median,
        ),
        (
            "startup_delay_miss_median",
            a.startup_delay_miss.median,
            b.startup_delay_miss.median,
        ),
        (
            "total_stall_ticks",
            a.total_stall_ticks as f64,
            b.total_stall_ticks as f64,
        ),
        (
            "transcode_count",
            a.transcode_count as f64,
            b.transcode_count as f64,
        ),
    ];
    Ok(rows
        .into_iter()
        .map(|(metric, a, b)| CompareRow {
            metric: metric.to_owned(),
            a,
            b,
            delta: a - b,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(fingerprint: &str, origin: u64) -> SimReport {
        SimReport {
            seed: 1,
            fingerprint: fingerprint.into(),
            no_cache: false,
            requests: 10,
            cache_hits: 5,
            cache_misses: 5,
            not_found: 0,
            failed: 0,
            unfinished: 0,
            hit_rate: 0.5,
            origin_bytes: origin,
            client_bytes: 100,
            origin_equivalent_bytes: 100,
            bandwidth_saved_ratio: 0.5,
            transcode_count: 0,
            startup_delay_hit: HistogramSummary::default(),
            startup_delay_miss: HistogramSummary::default(),
            total_stall_ticks: 0,
            per_node_fetches: BTreeMap::new(),
            ticks_run: 100,
        }
    }

    #[test]
    fn compare_requires_matching_fingerprints() {
        let a = report("aaaa", 50);
        let b = report("bbbb", 100);
        assert!(matches!(
            compare_runs(&a, &b),
            Err(SimError::MismatchedConfigs(_))
        ));
    }

    #[test]
    fn compare_reports_origin_delta() {
        let a = report("same", 50);
        let b = report("same", 100);
        let rows = compare_runs(&a, &b).unwrap();
        let origin = rows.iter().find(|r| r.metric == "origin_bytes").unwrap();
        assert_eq!(origin.delta, -50.0);
    }
}

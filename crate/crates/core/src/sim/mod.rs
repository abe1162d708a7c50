//! Deterministic discrete-time simulation.
//!
//! The engine owns a virtual clock and models origin nodes (fixed latency,
//! per-tick byte budget), the client links, telemetry, and the request
//! workload. It drives the gateway's session machine, cache, registry and
//! fetch path through their public interfaces; two runs with the same
//! config and seed produce byte-identical event logs.

mod config;
mod engine;
mod report;
mod workload;

pub use config::{
    FixedRequest, ProfileMix, ProfileSpec, SimConfig, SimNodeSpec, SimServiceConfig, VideoSpec,
    WorkloadSpec,
};
pub use engine::{run_simulation, synthesize_asset, RunOptions, SimRun};
pub use report::{compare_runs, CompareRow, SimReport};
pub use workload::{generate_workload, zipf_weights, Request};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("reports are from different runs: {0}")]
    MismatchedConfigs(String),
    #[error("simulation passed its hard tick cap; a session cannot make progress")]
    Runaway,
}

/// Runs a batch of independent simulations, in parallel when the `parallel`
/// feature is enabled. Each run is single-threaded and deterministic, so
/// the output is identical to [`run_batch_sequential`].
pub fn run_batch(configs: &[SimConfig]) -> Vec<Result<SimRun, SimError>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs
            .par_iter()
            .map(|c| run_simulation(c, &RunOptions::default()))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_batch_sequential(configs)
    }
}

/// Sequential form of [`run_batch`]; always available as the reference
/// path.
pub fn run_batch_sequential(configs: &[SimConfig]) -> Vec<Result<SimRun, SimError>> {
    configs
        .iter()
        .map(|c| run_simulation(c, &RunOptions::default()))
        .collect()
}

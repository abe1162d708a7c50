//! Workload generation: fixed traces pass through, Zipf traces are sampled
//! by inverse CDF over the normalized rank weights.

use super::config::{SimConfig, WorkloadSpec};
use crate::clock::Tick;
use crate::ids::{ProfileId, VideoId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub tick: Tick,
    pub video: VideoId,
    pub profile: ProfileId,
}

/// Rank weights `r^(-exponent)` for ranks 1..=n, exponent in thousandths.
/// Exponent zero is the uniform limit. Whole exponents use exact powers so
/// e.g. the rank-1/rank-2 ratio at exponent 1000 is exactly 2.0.
pub fn zipf_weights(n: usize, exponent_milli: u32) -> Vec<f64> {
    let s_int = exponent_milli / 1000;
    let s_frac = exponent_milli % 1000;
    (1..=n)
        .map(|r| {
            let r = r as f64;
            if s_frac == 0 {
                (1.0 / r).powi(s_int as i32)
            } else {
                r.powf(-(f64::from(exponent_milli) / 1000.0))
            }
        })
        .collect()
}

fn draw_index(cum: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    // 53-bit uniform in [0, 1); deterministic given the stream.
    let u = (rng.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * total;
    match cum.binary_search_by(|c| c.partial_cmp(&u).expect("finite weights")) {
        Ok(i) => (i + 1).min(cum.len() - 1),
        Err(i) => i.min(cum.len() - 1),
    }
}

/// Deterministic trace for the given config and its seed.
pub fn generate_workload(cfg: &SimConfig) -> Vec<Request> {
    match &cfg.workload {
        WorkloadSpec::Fixed { trace } => {
            let mut out: Vec<Request> = trace
                .iter()
                .map(|r| Request {
                    tick: Tick(r.tick),
                    video: VideoId::new(r.video.as_str()),
                    profile: ProfileId::new(r.profile.as_str()),
                })
                .collect();
            // arrivals replay in time order; same-tick entries keep their
            // written order
            out.sort_by_key(|r| r.tick);
            out
        }
        WorkloadSpec::Zipf {
            exponent_milli,
            requests,
            inter_arrival_ticks,
            profiles,
        } => {
            if *requests == 0 || cfg.catalog.is_empty() {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let weights = zipf_weights(cfg.catalog.len(), *exponent_milli);
            let mut cum = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in &weights {
                acc += w;
                cum.push(acc);
            }
            let total = acc;

            let profile_total: u64 = profiles.iter().map(|p| u64::from(p.weight)).sum();
            let mut out = Vec::with_capacity(*requests as usize);
            for i in 0..*requests {
                let video_idx = draw_index(&cum, total, &mut rng);
                let mut pick = rng.gen_range(0..profile_total);
                let mut profile = &profiles[0].profile;
                for p in profiles {
                    if pick < u64::from(p.weight) {
                        profile = &p.profile;
                        break;
                    }
                    pick -= u64::from(p.weight);
                }
                out.push(Request {
                    tick: Tick(i * inter_arrival_ticks),
                    video: VideoId::new(cfg.catalog[video_idx].id.as_str()),
                    profile: ProfileId::new(profile.as_str()),
                });
            }
            out
        }
    }
}

//! Acceptance suite: one test per release criterion, each printing a
//! PASS line. Run with `cargo test -p bbm --test acceptance -- --nocapture`.

mod shadow;

use bbm_core::cache::{CacheKey, CacheStore};
use bbm_core::clock::Tick;
use bbm_core::ids::{NodeId, ProfileId, VideoId};
use bbm_core::media::{
    self, frame_size_bytes, DeviceProfile, FormatVariantKey, VideoAsset, CONTAINER_HEADER_LEN,
};
use bbm_core::registry::{select_best_node, NodeRecord};
use bbm_core::sim::{
    run_simulation, FixedRequest, ProfileMix, RunOptions, SimConfig, SimNodeSpec,
    SimServiceConfig, SimRun, VideoSpec, WorkloadSpec,
};
use bbm_core::stream::{
    CollectSink, StreamMachine, StreamPlan, StreamSource, StreamStatus,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadow::{ShadowCache, ShadowOutcome};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

fn pass(criterion: u32, name: &str, elapsed: std::time::Duration, budget_s: u64) {
    assert!(
        elapsed.as_secs() < budget_s,
        "criterion {criterion} took {elapsed:?}, budget {budget_s}s"
    );
    eprintln!(
        "acceptance {criterion} ({name}): PASS in {:.2}s",
        elapsed.as_secs_f64()
    );
}

fn cif_container_len(frame_count: u32) -> u64 {
    CONTAINER_HEADER_LEN as u64 + frame_size_bytes(352, 288) * u64::from(frame_count)
}

/// Ten ~5 MB CIF originals on one node, 100 requests round-robin.
fn headline_config() -> SimConfig {
    let frame_counts: [u32; 10] = [33, 31, 35, 33, 32, 34, 33, 30, 36, 33];
    let catalog: Vec<VideoSpec> = frame_counts
        .iter()
        .enumerate()
        .map(|(i, &frame_count)| VideoSpec {
            id: format!("v{i}"),
            codec_id: 1,
            width: 352,
            height: 288,
            fps: 30,
            frame_count,
        })
        .collect();
    let hosted = catalog.iter().map(|v| v.id.clone()).collect();
    let trace = (0..100)
        .map(|i| FixedRequest {
            tick: i * 200,
            video: format!("v{}", i % 10),
            profile: "qcif".into(),
        })
        .collect();
    SimConfig {
        seed: 2024,
        tick_ms: 10,
        duration_ticks: 200_000,
        client_link_kbps: 20_000,
        nodes: vec![SimNodeSpec {
            id: "origin".into(),
            latency_ms: 30,
            capacity_kbps: 40_000,
            signal_db: -55,
            storage_bytes: 1 << 33,
            hosted,
            drop_after_responses: None,
            telemetry_stop_tick: None,
        }],
        catalog,
        workload: WorkloadSpec::Fixed { trace },
        service: SimServiceConfig::default(),
        profiles: vec![],
    }
}

#[test]
fn acceptance_1_repeat_request_bandwidth_saving() {
    let start = Instant::now();
    let cfg = headline_config();
    let catalog_total: u64 = cfg
        .catalog
        .iter()
        .map(|v| cif_container_len(v.frame_count))
        .sum();
    let per_request_total: u64 = (0..100)
        .map(|i| cif_container_len(cfg.catalog[i % 10].frame_count))
        .sum();

    let cached = run_simulation(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(cached.report.requests, 100);
    assert_eq!(cached.report.failed, 0);
    assert_eq!(
        cached.report.origin_bytes, catalog_total,
        "cached run must fetch each of the 10 containers exactly once"
    );

    let baseline = run_simulation(&cfg, &RunOptions { no_cache: true }).unwrap();
    assert_eq!(baseline.report.failed, 0);
    assert_eq!(
        baseline.report.origin_bytes, per_request_total,
        "no-cache baseline must fetch one container per request"
    );
    assert!(baseline.report.origin_bytes > cached.report.origin_bytes);

    pass(1, "repeat-request bandwidth saving", start.elapsed(), 10);
}

// ---------------------------------------------------------------------

fn oracle_best_set(candidates: &[NodeRecord]) -> Vec<NodeId> {
    let key = |n: &NodeRecord| {
        (
            n.route_time_ms,
            std::cmp::Reverse(n.channel_capacity_kbps),
            std::cmp::Reverse(n.signal_strength_db),
        )
    };
    let best = candidates.iter().map(key).min().expect("non-empty");
    let mut ids: Vec<NodeId> = candidates
        .iter()
        .filter(|n| key(n) == best)
        .map(|n| n.node_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

fn record(id: String, route: u64, cap: u64, sig: i32) -> NodeRecord {
    NodeRecord {
        node_id: NodeId::new(id),
        address: String::new(),
        route_time_ms: route,
        channel_capacity_kbps: cap,
        signal_strength_db: sig,
        available_storage_bytes: 0,
        last_telemetry: Tick(0),
        forced_stale: false,
        hosted_videos: BTreeSet::new(),
    }
}

#[test]
fn acceptance_2_node_selection_matches_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut non_tied = 0u32;

    for fleet_idx in 0..1000 {
        let size = rng.gen_range(1..=20);
        let candidates: Vec<NodeRecord> = (0..size)
            .map(|i| {
                // Half the draws come from tiny value sets to force ties.
                let route = if rng.gen_bool(0.5) {
                    *[10u64, 20, 30].get(rng.gen_range(0..3)).unwrap()
                } else {
                    rng.gen_range(0..10_000)
                };
                let cap = if rng.gen_bool(0.5) {
                    *[1_000u64, 5_000].get(rng.gen_range(0..2)).unwrap()
                } else {
                    rng.gen_range(1..1_000_000)
                };
                let sig = if rng.gen_bool(0.5) {
                    *[-70i32, -60].get(rng.gen_range(0..2)).unwrap()
                } else {
                    rng.gen_range(-120..0)
                };
                record(format!("f{fleet_idx}n{i}"), route, cap, sig)
            })
            .collect();

        let expected = oracle_best_set(&candidates);
        // Permutation invariance: shuffle before selecting.
        let mut shuffled = candidates.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let picked = select_best_node(&shuffled, &mut rng);
        assert!(
            expected.contains(&picked.node_id),
            "fleet {fleet_idx}: picked {} outside oracle set {expected:?}",
            picked.node_id
        );
        if expected.len() == 1 {
            non_tied += 1;
            assert_eq!(picked.node_id, expected[0], "fleet {fleet_idx}");
        }
    }
    assert!(non_tied > 300, "tie forcing left too few decisive fleets");

    // Fully tied fleets: uniformity over 10,000 seeded draws.
    for k in 2..=6usize {
        let fleet: Vec<NodeRecord> = (0..k)
            .map(|i| record(format!("t{i}"), 10, 5000, -60))
            .collect();
        let mut draw_rng = ChaCha8Rng::seed_from_u64(4321 + k as u64);
        let mut counts = BTreeMap::new();
        for _ in 0..10_000 {
            let picked = select_best_node(&fleet, &mut draw_rng);
            *counts.entry(picked.node_id).or_insert(0u64) += 1;
        }
        let expected = 10_000.0 / k as f64;
        let chi2: f64 = counts
            .values()
            .map(|&obs| {
                let d = obs as f64 - expected;
                d * d / expected
            })
            .sum();
        let critical = ChiSquared::new((k - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(
            chi2 < critical,
            "k={k}: chi2 {chi2:.2} >= {critical:.2}; counts {counts:?}"
        );
    }

    pass(2, "node-selection oracle equivalence", start.elapsed(), 30);
}

// ---------------------------------------------------------------------

#[test]
fn acceptance_3_transcode_arithmetic() {
    let start = Instant::now();
    let frames = 61u32;
    let in_size = frame_size_bytes(352, 288) as usize;
    let payload: Vec<u8> = (0..in_size * frames as usize)
        .map(|i| (i % 251) as u8)
        .collect();

    for in_fps in 1..=60u8 {
        let asset = VideoAsset::new(
            VideoId::new("grid"),
            1,
            352,
            288,
            in_fps,
            frames,
            payload.clone(),
        )
        .unwrap();
        for out_fps in 1..=60u8 {
            let profile =
                DeviceProfile::new(ProfileId::new("q"), 1, 176, 144, out_fps).unwrap();
            let out = media::transcode(&asset, &profile).unwrap();
            // Independent oracle: enumerate the floor rule.
            let (i_in, i_out) = (u64::from(in_fps), u64::from(out_fps.min(in_fps)));
            let kept = (1..=u64::from(frames))
                .filter(|i| (i * i_out) / i_in > ((i - 1) * i_out) / i_in)
                .count() as u64;
            assert_eq!(kept, u64::from(frames) * i_out / i_in, "closed form");
            assert_eq!(
                out.payload.len() as u64,
                kept * 38_016,
                "in_fps={in_fps} out_fps={out_fps}"
            );
            assert_eq!(u64::from(out.frame_count), kept);
            assert_eq!(out.fps, in_fps.min(out_fps));
        }
    }

    // Idempotence and identity on 1,000 randomized assets.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let w = rng.gen_range(2..=64u16);
        let h = rng.gen_range(2..=64u16);
        let fps = rng.gen_range(1..=60u8);
        let frames = rng.gen_range(0..=12u32);
        let size = frame_size_bytes(w, h) as usize * frames as usize;
        let mut payload = vec![0u8; size];
        rng.fill_bytes(&mut payload);
        let asset = VideoAsset::new(VideoId::new("r"), 1, w, h, fps, frames, payload).unwrap();

        // Exact match: transcode must be the identity, bit for bit.
        let matching = DeviceProfile::new(ProfileId::new("m"), 1, w, h, fps.max(1)).unwrap();
        let same = media::transcode(&asset, &matching).unwrap();
        assert_eq!(same, asset);

        // Reduction: applying the same profile twice changes nothing.
        let down = DeviceProfile::new(
            ProfileId::new("d"),
            1,
            (w / 2).max(1),
            (h / 2).max(1),
            (fps / 2).max(1),
        )
        .unwrap();
        let once = media::transcode(&asset, &down).unwrap();
        let twice = media::transcode(&once, &down).unwrap();
        assert_eq!(once, twice);
        assert!(once.payload.len() <= asset.payload.len());
    }

    pass(3, "transcode arithmetic", start.elapsed(), 60);
}

// ---------------------------------------------------------------------

struct RateSource {
    data: Vec<u8>,
    avail: std::cell::Cell<u64>,
}

impl StreamSource for RateSource {
    fn contiguous_bytes(&self) -> u64 {
        self.avail.get()
    }
    fn read_range(&self, offset: u64, len: usize) -> Result<Vec<u8>, bbm_core::cache::CacheError> {
        Ok(self.data[offset as usize..offset as usize + len].to_vec())
    }
    fn failed(&self) -> Option<String> {
        None
    }
}

/// Drives one fill/drain scenario to completion; returns (stall events,
/// delivered bytes, expected bytes).
fn run_rate_scenario(
    seg: u32,
    total_segments: u32,
    fill_per_tick: u64,
    drain_per_tick: u64,
    threshold: u32,
) -> (usize, Vec<u8>, Vec<u8>) {
    let total = u64::from(seg) * u64::from(total_segments);
    let data: Vec<u8> = (0..total).map(|i| (i % 249) as u8).collect();
    let source = RateSource {
        data: data.clone(),
        avail: std::cell::Cell::new(0),
    };
    let plan = StreamPlan {
        total_bytes: total,
        segment_size: seg,
        total_segments,
        prefetch_threshold: threshold.min(total_segments).max(1),
        playback_bitrate_bps: 0,
        pace_bps: Some(drain_per_tick * 800), // tick_ms 10 -> bytes/tick
        bandwidth_constrained: false,
        tick_ms: 10,
    };
    let mut machine = StreamMachine::new(plan, Tick(0));
    let mut sink = CollectSink::default();
    let mut filled: u64 = 0;
    for t in 1..5_000_000u64 {
        filled = (filled + fill_per_tick).min(total);
        // segments become readable only when complete
        let complete_segments = filled / u64::from(seg);
        source.avail.set(complete_segments * u64::from(seg));
        match machine.on_tick(Tick(t), &source, &mut sink) {
            StreamStatus::Finished => break,
            StreamStatus::Failed(e) => panic!("stream failed: {e}"),
            _ => {}
        }
    }
    (
        machine.progress().stall_events.len(),
        sink.bytes,
        data,
    )
}

#[test]
fn acceptance_4_stream_while_fill_no_stall() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // Fill keeping up with the drain: never a stall, bytes exact.
    for case in 0..500 {
        let seg = rng.gen_range(512..=8192u32);
        let total_segments = rng.gen_range(20..=40u32);
        let drain = rng.gen_range(64..=u64::from(seg)); // <= one segment/tick
        let fill = drain * rng.gen_range(1..=4u64) + rng.gen_range(0..64u64);
        let threshold = rng.gen_range(1..=4u32);
        let (stalls, got, want) = run_rate_scenario(seg, total_segments, fill, drain, threshold);
        assert_eq!(stalls, 0, "case {case}: fill {fill} >= drain {drain} stalled");
        assert_eq!(got, want, "case {case}: delivered bytes differ");
    }

    // Fill at half the drain rate: stalls must surface.
    for case in 0..50 {
        let seg = rng.gen_range(512..=4096u32);
        let total_segments = rng.gen_range(24..=40u32);
        let drain = rng.gen_range(256..=u64::from(seg));
        let fill = (drain / 2).max(1);
        let (stalls, got, want) = run_rate_scenario(seg, total_segments, fill, drain, 2);
        assert!(stalls > 0, "case {case}: fill {fill} < drain {drain} hid its stalls");
        assert_eq!(got, want, "case {case}: delivered bytes differ");
    }

    pass(4, "stream-while-fill no-stall property", start.elapsed(), 30);
}

// ---------------------------------------------------------------------

#[derive(Default, Clone)]
struct SessionView {
    video: String,
    hit: bool,
    startup: Option<u64>,
    done: bool,
}

fn session_views(run: &SimRun) -> Vec<SessionView> {
    let mut views: BTreeMap<u64, SessionView> = BTreeMap::new();
    for line in &run.events {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["kind"].as_str() {
            Some("request") => {
                views.entry(v["session"].as_u64().unwrap()).or_default().video =
                    v["video"].as_str().unwrap().to_owned();
            }
            Some("transition") if v["to"] == "cache_hit" => {
                views.entry(v["session"].as_u64().unwrap()).or_default().hit = true;
            }
            Some("session_done") => {
                let view = views.entry(v["session"].as_u64().unwrap()).or_default();
                view.startup = v["startup_ticks"].as_u64();
                view.done = v["outcome"] == "done";
            }
            _ => {}
        }
    }
    views.into_values().collect()
}

fn median(mut xs: Vec<u64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2] as f64
}

fn check_startup_ordering(run: &SimRun, label: &str) {
    let views = session_views(run);
    let hit_delays: Vec<u64> = views
        .iter()
        .filter(|s| s.hit && s.done)
        .filter_map(|s| s.startup)
        .collect();
    let miss_delays: Vec<u64> = views
        .iter()
        .filter(|s| !s.hit && s.done)
        .filter_map(|s| s.startup)
        .collect();
    if !hit_delays.is_empty() && !miss_delays.is_empty() {
        assert!(
            median(hit_delays.clone()) < median(miss_delays.clone()),
            "{label}: hit median {} not below miss median {}",
            median(hit_delays),
            median(miss_delays)
        );
    }

    // Every hit on a video beats that video's first (miss) request.
    let mut first_delay: BTreeMap<&str, u64> = BTreeMap::new();
    for s in &views {
        if !s.hit && s.done {
            if let Some(d) = s.startup {
                first_delay.entry(s.video.as_str()).or_insert(d);
            }
        }
    }
    for s in &views {
        if s.hit && s.done {
            if let (Some(d), Some(first)) = (s.startup, first_delay.get(s.video.as_str())) {
                assert!(
                    d < *first,
                    "{label}: repeat of {} took {d} ticks, first took {first}",
                    s.video
                );
            }
        }
    }
}

#[test]
fn acceptance_5_startup_delay_ordering() {
    let start = Instant::now();

    // Scenario battery: the headline run, a two-node zipf run with
    // transcoding, and a qcif-native run with stream-while-fill.
    let headline = run_simulation(&headline_config(), &RunOptions::default()).unwrap();
    check_startup_ordering(&headline, "headline");
    assert!(
        headline.report.startup_delay_hit.median < headline.report.startup_delay_miss.median
    );

    let zipf = SimConfig {
        seed: 5,
        tick_ms: 10,
        duration_ticks: 400_000,
        client_link_kbps: 16_000,
        nodes: vec![
            SimNodeSpec {
                id: "a".into(),
                latency_ms: 20,
                capacity_kbps: 30_000,
                signal_db: -50,
                storage_bytes: 1 << 33,
                hosted: (0..8).map(|i| format!("z{i}")).collect(),
                drop_after_responses: None,
                telemetry_stop_tick: None,
            },
            SimNodeSpec {
                id: "b".into(),
                latency_ms: 60,
                capacity_kbps: 30_000,
                signal_db: -60,
                storage_bytes: 1 << 33,
                hosted: (0..8).map(|i| format!("z{i}")).collect(),
                drop_after_responses: None,
                telemetry_stop_tick: None,
            },
        ],
        catalog: (0..8)
            .map(|i| VideoSpec {
                id: format!("z{i}"),
                codec_id: 1,
                width: 352,
                height: 288,
                fps: 30,
                frame_count: 12 + i,
            })
            .collect(),
        workload: WorkloadSpec::Zipf {
            exponent_milli: 1000,
            requests: 120,
            inter_arrival_ticks: 120,
            profiles: vec![
                ProfileMix {
                    profile: "qcif".into(),
                    weight: 3,
                },
                ProfileMix {
                    profile: "cif".into(),
                    weight: 1,
                },
            ],
        },
        service: SimServiceConfig::default(),
        profiles: vec![],
    };
    let zipf_run = run_simulation(&zipf, &RunOptions::default()).unwrap();
    assert_eq!(zipf_run.report.failed, 0);
    assert!(zipf_run.report.cache_hits > 0);
    check_startup_ordering(&zipf_run, "zipf");

    let swf = SimConfig {
        catalog: vec![VideoSpec {
            id: "q".into(),
            codec_id: 1,
            width: 176,
            height: 144,
            fps: 15,
            frame_count: 120,
        }],
        nodes: vec![SimNodeSpec {
            id: "n".into(),
            latency_ms: 40,
            capacity_kbps: 20_000,
            signal_db: -60,
            storage_bytes: 1 << 33,
            hosted: vec!["q".into()],
            drop_after_responses: None,
            telemetry_stop_tick: None,
        }],
        workload: WorkloadSpec::Fixed {
            trace: (0..6)
                .map(|i| FixedRequest {
                    tick: i * 3000,
                    video: "q".into(),
                    profile: "qcif".into(),
                })
                .collect(),
        },
        ..headline_config()
    };
    let swf_run = run_simulation(&swf, &RunOptions::default()).unwrap();
    assert_eq!(swf_run.report.failed, 0);
    check_startup_ordering(&swf_run, "stream-while-fill");

    pass(5, "startup-delay ordering", start.elapsed(), 60);
}

// ---------------------------------------------------------------------

#[test]
fn acceptance_6_cache_lru_accounting_shadow_model() {
    let start = Instant::now();
    let segment_size = 50u32;
    let budget = 1000u64;
    let store = CacheStore::new(Some(budget));
    let mut model = ShadowCache::new(Some(budget), segment_size);
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let keys: Vec<CacheKey> = (0..10)
        .flat_map(|v| {
            [15u8, 30].map(|fps| {
                CacheKey::new(
                    VideoId::new(format!("v{v}")),
                    FormatVariantKey {
                        codec_id: 1,
                        width: 176,
                        height: 144,
                        fps,
                    },
                )
            })
        })
        .collect();

    let mut pins: Vec<(CacheKey, bbm_core::cache::EntryHandle)> = Vec::new();
    let mut fills: Vec<(CacheKey, bbm_core::cache::FillHandle)> = Vec::new();

    for step in 0..10_000u64 {
        let now = Tick(step);
        let key = keys[rng.gen_range(0..keys.len())].clone();
        match rng.gen_range(0..100) {
            // lookup, sometimes holding the pin
            0..=29 => {
                let real = store.lookup(&key, now);
                let shadow_hit = model.lookup(&key, now);
                assert_eq!(real.is_some(), shadow_hit, "step {step}: lookup {key}");
                match real {
                    Some(handle) if rng.gen_bool(0.4) && pins.len() < 6 => {
                        pins.push((key, handle));
                    }
                    Some(_) => model.unpin(&key), // handle drops here
                    None => {}
                }
            }
            // release a held pin
            30..=39 => {
                if !pins.is_empty() {
                    let (k, handle) = pins.swap_remove(rng.gen_range(0..pins.len()));
                    drop(handle);
                    model.unpin(&k);
                }
            }
            // start (or resume) a fill
            40..=69 => {
                if fills.iter().any(|(k, _)| *k == key) {
                    continue; // this trace holds one handle per key at a time
                }
                let total = match model.entries.get(&key) {
                    Some(e) => e.total, // resume with the matching size
                    None => rng.gen_range(0..400u64),
                };
                let shadow_before: Vec<String> = model
                    .entries
                    .iter()
                    .map(|(k, e)| {
                        format!(
                            "{k} total={} stored={} pins={} active={} complete={}",
                            e.total,
                            model.stored(e),
                            e.pins,
                            e.active_fill,
                            e.complete
                        )
                    })
                    .collect();
                let (expected, expected_victims) = model.begin_fill(&key, total, now);
                match store.begin_fill(&key, total, segment_size, now) {
                    Ok(grant) => {
                        assert_eq!(expected, ShadowOutcome::Ok, "step {step}: {key}");
                        assert_eq!(grant.evicted, expected_victims, "step {step}: victims");
                        fills.push((key, grant.fill));
                    }
                    Err(e) => {
                        let got = match e {
                            bbm_core::cache::CacheError::AlreadyComplete => {
                                ShadowOutcome::AlreadyComplete
                            }
                            bbm_core::cache::CacheError::FillInProgress => {
                                ShadowOutcome::FillInProgress
                            }
                            bbm_core::cache::CacheError::TotalSizeMismatch { .. } => {
                                ShadowOutcome::TotalSizeMismatch
                            }
                            bbm_core::cache::CacheError::InsufficientBudget { .. } => {
                                ShadowOutcome::InsufficientBudget
                            }
                            other => panic!("step {step}: unexpected error {other}"),
                        };
                        assert_eq!(
                            got, expected,
                            "step {step}: {key} total={total} real_free={} shadow:\n{}",
                            store.free_bytes(),
                            shadow_before.join("\n")
                        );
                    }
                }
            }
            // write the next absent segment of an open fill
            70..=89 => {
                if fills.is_empty() {
                    continue;
                }
                let slot = rng.gen_range(0..fills.len());
                let (k, fill) = &mut fills[slot];
                if let Some(idx) = fill.next_absent_segment() {
                    assert_eq!(model.next_absent(k), Some(idx), "step {step}");
                    let len = fill.segment_len(idx) as usize;
                    fill.write_segment(idx, &vec![(step % 251) as u8; len])
                        .unwrap();
                    model.write_segment(k, idx);
                } else {
                    let (k, fill) = fills.swap_remove(slot);
                    drop(fill);
                    model.drop_fill(&k);
                }
            }
            // abandon a fill midway (restartable) or evict explicitly
            _ => {
                if rng.gen_bool(0.5) && !fills.is_empty() {
                    let (k, fill) = fills.swap_remove(rng.gen_range(0..fills.len()));
                    drop(fill);
                    model.drop_fill(&k);
                } else {
                    let needed = rng.gen_range(0..300u64);
                    let real_victims = store.evict_until(needed);
                    let shadow_victims = model.evict_until(needed);
                    assert_eq!(real_victims, shadow_victims, "step {step}: evict_until");
                }
            }
        }

        // accounting, reservation and budget agree at every boundary
        assert_eq!(
            store.bytes_used(),
            model.bytes_used(),
            "step {step}: bytes_used"
        );
        assert!(store.bytes_used() <= budget, "step {step}: budget exceeded");
        assert_eq!(
            store.free_bytes(),
            budget - model.bytes_used() - model.reserved(),
            "step {step}: reservation accounting"
        );
    }

    pass(6, "cache LRU/accounting shadow model", start.elapsed(), 10);
}

// ---------------------------------------------------------------------

#[test]
fn acceptance_7_cli_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = headline_config();
    // trim the workload so two CLI runs stay snappy
    cfg.workload = WorkloadSpec::Zipf {
        exponent_milli: 1000,
        requests: 60,
        inter_arrival_ticks: 150,
        profiles: vec![ProfileMix {
            profile: "qcif".into(),
            weight: 1,
        }],
    };
    let cfg_path = dir.path().join("sim.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let mut hashes = Vec::new();
    for i in 0..2 {
        let log = dir.path().join(format!("events{i}.ndjson"));
        let out = dir.path().join(format!("report{i}.json"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_bbm"))
            .args(["simulate", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .arg("--log")
            .arg(&log)
            .status()
            .expect("bbm simulate runs");
        assert!(status.success());
        let bytes = std::fs::read(&log).unwrap();
        assert!(!bytes.is_empty());
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(&bytes);
        hashes.push(h.finalize());
    }
    assert_eq!(hashes[0], hashes[1], "event logs differ between runs");

    pass(7, "event-log determinism across runs", start.elapsed(), 30);
}

// ---------------------------------------------------------------------

#[test]
fn acceptance_8_crash_safety_across_restart() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = headline_config();
    cfg.catalog.truncate(3);
    cfg.nodes[0].hosted.truncate(3);
    cfg.workload = WorkloadSpec::Fixed {
        trace: (0..6)
            .map(|i| FixedRequest {
                tick: i * 500,
                video: format!("v{}", i % 3),
                profile: "qcif".into(),
            })
            .collect(),
    };
    cfg.service.cache_dir = Some(dir.path().to_path_buf());

    // Batch 1 fills the cache, then the process "dies" (engine dropped).
    let first = run_simulation(&cfg, &RunOptions::default()).unwrap();
    let catalog_total: u64 = cfg
        .catalog
        .iter()
        .map(|v| cif_container_len(v.frame_count))
        .sum();
    assert_eq!(first.report.origin_bytes, catalog_total);

    // Batch 2 after restart: every request is a hit, zero origin bytes.
    let second = run_simulation(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(second.report.origin_bytes, 0);
    assert_eq!(second.report.cache_hits, second.report.requests);
    assert_eq!(second.report.failed, 0);

    pass(8, "crash safety across restart", start.elapsed(), 30);
}

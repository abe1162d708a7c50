//! The request orchestrator: one state machine per client session.
//!
//! A session moves Received → IndexLookup → {CacheHit, CacheMiss}; misses
//! go HostLookup → {NotFound, NodeSelected} → Fetching; both paths meet at
//! FormatCheck → {Transcoding, Ready} → Streaming → {Done, Failed}. The
//! index is consulted device-matched variant first, then any cached
//! rendition large enough to transcode down from. On the fetch path the
//! rendition's header is inspected as soon as the first segment lands: a
//! format match streams while the fill is still running; a mismatch waits
//! for completion, transcodes, caches the new variant alongside the
//! original, and streams that.
//!
//! `poll_session` advances a session as far as it can without blocking;
//! drivers (the simulator's tick loop, the live server's connection
//! threads) poll until they get a stream to run or a terminal status.

use crate::cache::{CacheKey, CacheStore, EntryHandle, FillState};
use crate::clock::Tick;
use crate::fetch::{JobState, JobStatus, JobTable, JobTicket};
use crate::ids::{NodeId, ProfileId, VideoId};
use crate::media::{
    self, ContainerInfo, DeviceProfile, FormatVariantKey, MediaError,
};
use crate::protocol;
use crate::registry::{NodeRecord, NodeRegistry};
use crate::stream::{self, CacheSource, StreamConfig, StreamPlan, StreamProgress, StreamError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown profile {0}")]
    UnknownProfile(ProfileId),
}

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub segment_size_bytes: u32,
    pub prefetch_seconds: u32,
    pub fetch_timeout_s: u32,
    pub telemetry_interval_s: u32,
    pub telemetry_staleness_s: u32,
    pub tick_ms: u32,
    pub rng_seed: u64,
    pub client_bandwidth_kbps: u64,
    pub pace_cap_kbps: Option<u64>,
    pub burst: bool,
    pub cache_budget_bytes: Option<u64>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            segment_size_bytes: crate::cache::DEFAULT_SEGMENT_SIZE,
            prefetch_seconds: 2,
            fetch_timeout_s: 5,
            telemetry_interval_s: 5,
            telemetry_staleness_s: 15,
            tick_ms: 10,
            rng_seed: 0,
            client_bandwidth_kbps: 10_000,
            pace_cap_kbps: None,
            burst: false,
            cache_budget_bytes: None,
            cache_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn ticks_per_second(&self) -> u64 {
        (1000 / self.tick_ms.max(1)) as u64
    }

    pub fn staleness_ticks(&self) -> u64 {
        u64::from(self.telemetry_staleness_s) * self.ticks_per_second()
    }

    pub fn fetch_timeout_ticks(&self) -> u64 {
        u64::from(self.fetch_timeout_s) * self.ticks_per_second()
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            prefetch_seconds: self.prefetch_seconds,
            tick_ms: self.tick_ms,
            burst: self.burst,
            pace_cap_kbps: self.pace_cap_kbps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Received,
    IndexLookup,
    CacheHit,
    CacheMiss,
    HostLookup,
    NotFound,
    NodeSelected,
    Fetching,
    FormatCheck,
    Transcoding,
    Ready,
    Streaming,
    Done,
    Failed,
}

impl SessionState {
    pub fn as_str(&self) -> &'static str {
        match self {
            SessionState::Received => "received",
            SessionState::IndexLookup => "index_lookup",
            SessionState::CacheHit => "cache_hit",
            SessionState::CacheMiss => "cache_miss",
            SessionState::HostLookup => "host_lookup",
            SessionState::NotFound => "not_found",
            SessionState::NodeSelected => "node_selected",
            SessionState::Fetching => "fetching",
            SessionState::FormatCheck => "format_check",
            SessionState::Transcoding => "transcoding",
            SessionState::Ready => "ready",
            SessionState::Streaming => "streaming",
            SessionState::Done => "done",
            SessionState::Failed => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            SessionState::NotFound | SessionState::Done | SessionState::Failed
        )
    }
}

/// The session state graph. Drivers and the trace checker share it.
pub fn valid_transition(from: SessionState, to: SessionState) -> bool {
    use SessionState::*;
    matches!(
        (from, to),
        (Received, IndexLookup)
            | (IndexLookup, CacheHit)
            | (IndexLookup, CacheMiss)
            | (CacheHit, FormatCheck)
            | (CacheMiss, HostLookup)
            | (HostLookup, NotFound)
            | (HostLookup, NodeSelected)
            | (NodeSelected, Fetching)
            | (Fetching, FormatCheck)
            | (Fetching, Failed)
            | (FormatCheck, Transcoding)
            | (FormatCheck, Ready)
            | (FormatCheck, Failed)
            | (Transcoding, Ready)
            | (Transcoding, Failed)
            | (Ready, Streaming)
            | (Streaming, Done)
            | (Streaming, Failed)
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathClass {
    Hit,
    Miss,
    NotFound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalStatus {
    NotFound,
    FetchFailed,
    FormatUnsupported,
}

impl TerminalStatus {
    pub fn status_line(&self) -> &'static str {
        match self {
            TerminalStatus::NotFound => protocol::STATUS_NOT_AVAILABLE,
            TerminalStatus::FetchFailed => protocol::STATUS_FETCH_FAILED,
            TerminalStatus::FormatUnsupported => protocol::STATUS_FORMAT_UNSUPPORTED,
        }
    }
}

/// Events the gateway emits while driving sessions. The simulator logs
/// them; the live server forwards them to the process log.
pub trait TraceSink {
    fn transition(&mut self, _session: u64, _from: SessionState, _to: SessionState, _now: Tick) {}
    fn node_selected(&mut self, _session: u64, _node: &NodeId, _now: Tick) {}
    fn transcoded(
        &mut self,
        _session: u64,
        _video: &VideoId,
        _from: &FormatVariantKey,
        _to: &FormatVariantKey,
        _now: Tick,
    ) {
    }
    fn evictions(&mut self, _keys: &[CacheKey], _now: Tick) {}
    fn status(&mut self, _session: u64, _code: &str, _now: Tick) {}
}

/// Forwards trace events to the process log.
pub struct LogTrace;

impl TraceSink for LogTrace {
    fn transition(&mut self, session: u64, from: SessionState, to: SessionState, _now: Tick) {
        log::debug!("session {session}: {} -> {}", from.as_str(), to.as_str());
    }
    fn status(&mut self, session: u64, code: &str, _now: Tick) {
        log::info!("session {session}: {code}");
    }
}

/// Starts a claimed fetch job. The live server spawns a worker thread; the
/// simulator registers the job with its lockstep scheduler.
pub trait FetchStarter {
    fn start(&mut self, job: Arc<JobState>, candidates: Vec<NodeRecord>, dest: CacheStore);
}

enum HitRoute {
    Direct(CacheKey),
    TranscodeFrom(CacheKey),
}

pub struct Session {
    pub id: u64,
    pub video: VideoId,
    pub profile: DeviceProfile,
    pub arrival: Tick,
    pub state: SessionState,
    pub transitions: Vec<(SessionState, Tick)>,
    pub selected_node: Option<NodeId>,
    pub class: Option<PathClass>,
    route: Option<HitRoute>,
    job: Option<Arc<JobState>>,
    entry: Option<EntryHandle>,
    entry_store: Option<CacheStore>,
    header: Option<ContainerInfo>,
    announced_node: bool,
}

impl Session {
    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

/// Everything a driver needs to run the stream for a session.
pub struct StreamSetup {
    pub plan: StreamPlan,
    pub source: CacheSource,
    pub video: VideoId,
    pub variant: FormatVariantKey,
    pub total_bytes: u64,
    pub segment_size: u32,
}

pub enum SessionPoll {
    /// Waiting on fetch progress; poll again next tick.
    Pending,
    /// The session reached Streaming; run the stream, then call
    /// `finish_session` with the outcome.
    StartStream(Box<StreamSetup>),
    /// The session ended without a stream; the status line has been
    /// emitted through the trace sink and must be sent to the client.
    Terminal(TerminalStatus),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub count: u64,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: u64,
}

fn summarize(samples: &[u64]) -> HistogramSummary {
    if samples.is_empty() {
        return HistogramSummary::default();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let count = sorted.len() as u64;
    let sum: u128 = sorted.iter().map(|&v| u128::from(v)).sum();
    let pick = |q: f64| -> f64 {
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        sorted[idx] as f64
    };
    HistogramSummary {
        count,
        mean: sum as f64 / count as f64,
        median: pick(0.5),
        p95: pick(0.95),
        max: *sorted.last().unwrap(),
    }
}

#[derive(Default)]
struct MetricsInner {
    requests: u64,
    cache_hits: u64,
    cache_misses: u64,
    not_found: u64,
    failed: u64,
    origin_bytes: u64,
    client_bytes: u64,
    transcode_count: u64,
    origin_requests_per_node: BTreeMap<String, u64>,
    startup_delay_hit: Vec<u64>,
    startup_delay_miss: Vec<u64>,
    stall_time: Vec<u64>,
}

/// Point-in-time copy of the gateway counters.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub not_found: u64,
    pub failed: u64,
    pub origin_bytes: u64,
    pub client_bytes: u64,
    pub transcode_count: u64,
    pub origin_requests_per_node: BTreeMap<String, u64>,
    pub startup_delay_hit: HistogramSummary,
    pub startup_delay_miss: HistogramSummary,
    pub stall_time: HistogramSummary,
}

#[derive(Default)]
pub struct Metrics {
    inner: Mutex<MetricsInner>,
}

impl Metrics {
    pub fn record_origin_bytes(&self, n: u64) {
        self.inner.lock().unwrap().origin_bytes += n;
    }

    pub fn record_origin_request(&self, node: &NodeId) {
        *self
            .inner
            .lock()
            .unwrap()
            .origin_requests_per_node
            .entry(node.as_str().to_owned())
            .or_insert(0) += 1;
    }

    pub fn record_client_bytes(&self, n: u64) {
        self.inner.lock().unwrap().client_bytes += n;
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let m = self.inner.lock().unwrap();
        MetricsSnapshot {
            requests: m.requests,
            cache_hits: m.cache_hits,
            cache_misses: m.cache_misses,
            not_found: m.not_found,
            failed: m.failed,
            origin_bytes: m.origin_bytes,
            client_bytes: m.client_bytes,
            transcode_count: m.transcode_count,
            origin_requests_per_node: m.origin_requests_per_node.clone(),
            startup_delay_hit: summarize(&m.startup_delay_hit),
            startup_delay_miss: summarize(&m.startup_delay_miss),
            stall_time: summarize(&m.stall_time),
        }
    }

    /// Raw startup-delay samples `(hit, miss)`, in completion order.
    pub fn startup_samples(&self) -> (Vec<u64>, Vec<u64>) {
        let m = self.inner.lock().unwrap();
        (m.startup_delay_hit.clone(), m.startup_delay_miss.clone())
    }
}

pub struct Gateway {
    pub cache: CacheStore,
    pub registry: NodeRegistry,
    pub jobs: JobTable,
    pub metrics: Metrics,
    profiles: Mutex<BTreeMap<ProfileId, DeviceProfile>>,
    cfg: GatewayConfig,
    no_cache: bool,
    session_seq: AtomicU64,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Self {
        let cache = match &cfg.cache_dir {
            Some(dir) => CacheStore::load(dir, cfg.cache_budget_bytes, cfg.segment_size_bytes),
            None => CacheStore::new(cfg.cache_budget_bytes),
        };
        let registry = NodeRegistry::new(cfg.staleness_ticks());
        let mut profiles = BTreeMap::new();
        for p in media::builtin_profiles() {
            profiles.insert(p.profile_id.clone(), p);
        }
        Gateway {
            cache,
            registry,
            jobs: JobTable::new(),
            metrics: Metrics::default(),
            profiles: Mutex::new(profiles),
            cfg,
            no_cache: false,
            session_seq: AtomicU64::new(0),
        }
    }

    /// Disables the shared cache: every request fetches from origin into a
    /// private store. Baseline mode for A/B comparisons.
    pub fn set_no_cache(&mut self, enabled: bool) {
        self.no_cache = enabled;
    }

    pub fn no_cache(&self) -> bool {
        self.no_cache
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn add_profile(&self, profile: DeviceProfile) {
        self.profiles
            .lock()
            .unwrap()
            .insert(profile.profile_id.clone(), profile);
    }

    pub fn resolve_profile(&self, id: &ProfileId) -> Option<DeviceProfile> {
        self.profiles.lock().unwrap().get(id).cloned()
    }

    pub fn profile_ids(&self) -> Vec<ProfileId> {
        self.profiles.lock().unwrap().keys().cloned().collect()
    }

    /// Admits one client request. Fails without touching counters when the
    /// profile is unknown (the caller answers with a protocol error).
    pub fn begin_session(
        &self,
        video: VideoId,
        profile_id: &ProfileId,
        now: Tick,
    ) -> Result<Session, GatewayError> {
        let profile = self
            .resolve_profile(profile_id)
            .ok_or_else(|| GatewayError::UnknownProfile(profile_id.clone()))?;
        self.metrics.inner.lock().unwrap().requests += 1;
        let id = self.session_seq.fetch_add(1, Ordering::SeqCst);
        Ok(Session {
            id,
            video,
            profile,
            arrival: now,
            state: SessionState::Received,
            transitions: vec![(SessionState::Received, now)],
            selected_node: None,
            class: None,
            route: None,
            job: None,
            entry: None,
            entry_store: None,
            header: None,
            announced_node: false,
        })
    }

    fn set_state(
        &self,
        s: &mut Session,
        to: SessionState,
        now: Tick,
        trace: &mut dyn TraceSink,
    ) {
        debug_assert!(
            valid_transition(s.state, to),
            "illegal session transition {:?} -> {:?}",
            s.state,
            to
        );
        trace.transition(s.id, s.state, to, now);
        s.state = to;
        s.transitions.push((to, now));
    }

    fn classify(&self, s: &mut Session, class: PathClass) {
        if s.class.is_some() {
            return;
        }
        s.class = Some(class);
        let mut m = self.metrics.inner.lock().unwrap();
        match class {
            PathClass::Hit => m.cache_hits += 1,
            PathClass::Miss => m.cache_misses += 1,
            PathClass::NotFound => m.not_found += 1,
        }
    }

    /// Index decision for step order "device-matched variant, then original
    /// (largest transcodable rendition)". Only complete entries count; a
    /// filling entry is reached through the fetch path so the session joins
    /// the running job.
    fn index_decision(&self, video: &VideoId, profile: &DeviceProfile) -> Option<HitRoute> {
        let rows = self.cache.entries_for(video);
        let quality =
            |k: &FormatVariantKey| (k.width, k.height, k.fps);
        if let Some(row) = rows
            .iter()
            .filter(|r| {
                r.state == FillState::Complete
                    && media::key_matches_profile(&r.key.variant, profile)
            })
            .max_by_key(|r| quality(&r.key.variant))
        {
            return Some(HitRoute::Direct(row.key.clone()));
        }
        if let Some(row) = rows
            .iter()
            .filter(|r| {
                r.state == FillState::Complete
                    && r.key.variant.width >= profile.target_width
                    && r.key.variant.height >= profile.target_height
            })
            .max_by_key(|r| quality(&r.key.variant))
        {
            return Some(HitRoute::TranscodeFrom(row.key.clone()));
        }
        None
    }

    fn terminal(
        &self,
        s: &mut Session,
        status: TerminalStatus,
        now: Tick,
        trace: &mut dyn TraceSink,
    ) -> SessionPoll {
        let state = match status {
            TerminalStatus::NotFound => SessionState::NotFound,
            _ => SessionState::Failed,
        };
        if status == TerminalStatus::NotFound {
            self.classify(s, PathClass::NotFound);
        } else {
            self.metrics.inner.lock().unwrap().failed += 1;
        }
        self.set_state(s, state, now, trace);
        trace.status(s.id, status.status_line(), now);
        SessionPoll::Terminal(status)
    }

    /// Reads a complete rendition out of a store, transcodes it to the
    /// session's profile, and caches the new variant next to its source
    /// (falling back to a private store when the budget refuses it).
    fn materialize_variant(
        &self,
        src_store: &CacheStore,
        src_key: &CacheKey,
        s: &Session,
        now: Tick,
        trace: &mut dyn TraceSink,
    ) -> Result<(CacheStore, CacheKey), TerminalStatus> {
        let handle = src_store
            .lookup(src_key, now)
            .ok_or(TerminalStatus::FetchFailed)?;
        let bytes = handle
            .read_range(0, handle.total_bytes() as usize)
            .map_err(|_| TerminalStatus::FetchFailed)?;
        let asset = media::decode_container(s.video.clone(), &bytes)
            .map_err(|_| TerminalStatus::FetchFailed)?;
        let out = match media::transcode(&asset, &s.profile) {
            Ok(out) => out,
            Err(MediaError::UpscaleRequested { .. }) => {
                return Err(TerminalStatus::FormatUnsupported)
            }
            Err(_) => return Err(TerminalStatus::FetchFailed),
        };
        self.metrics.inner.lock().unwrap().transcode_count += 1;
        let vkey = CacheKey::new(s.video.clone(), out.variant());
        trace.transcoded(s.id, &s.video, &src_key.variant, &vkey.variant, now);
        let out_bytes = media::encode_container(&out);
        match src_store.insert_complete(&vkey, &out_bytes, self.cfg.segment_size_bytes, now) {
            Ok(evicted) => {
                trace.evictions(&evicted, now);
                Ok((src_store.clone(), vkey))
            }
            Err(crate::cache::CacheError::AlreadyComplete) => Ok((src_store.clone(), vkey)),
            Err(_) => {
                // Budget denial or a concurrent insert; serve this session
                // from a private copy and leave the shared cache alone.
                let private = CacheStore::new(None);
                private
                    .insert_complete(&vkey, &out_bytes, self.cfg.segment_size_bytes, now)
                    .expect("insert into unbounded store");
                Ok((private, vkey))
            }
        }
    }

    fn start_stream(
        &self,
        s: &mut Session,
        store: &CacheStore,
        key: &CacheKey,
        job: Option<Arc<JobState>>,
        now: Tick,
        trace: &mut dyn TraceSink,
    ) -> SessionPoll {
        let entry = match s.entry.take() {
            Some(e) if e.key() == key => e,
            _ => match store.lookup(key, now) {
                Some(e) => e,
                None => return self.terminal(s, TerminalStatus::FetchFailed, now, trace),
            },
        };
        let total = entry.total_bytes();
        let info = match s.header {
            Some(info) if info.variant() == key.variant => info,
            _ => {
                let head = match entry.read_range(0, media::CONTAINER_HEADER_LEN.min(total as usize)) {
                    Ok(h) => h,
                    Err(_) => return self.terminal(s, TerminalStatus::FetchFailed, now, trace),
                };
                match media::peek_header(&head) {
                    Ok(info) => info,
                    Err(_) => return self.terminal(s, TerminalStatus::FetchFailed, now, trace),
                }
            }
        };
        let scfg = self.cfg.stream_config();
        let plan = match stream::plan_stream(
            &info,
            total,
            self.cfg.segment_size_bytes,
            self.cfg.client_bandwidth_kbps,
            &scfg,
        ) {
            Ok(plan) => plan,
            Err(StreamError::BandwidthBelowPlayback { required_bps, available_bps }) => {
                // The device-matched rendition is still heavier than the
                // link; stream at link rate and measure the stalls.
                log::warn!(
                    "session {}: link {available_bps} b/s below playback {required_bps} b/s",
                    s.id
                );
                stream::plan_stream_degraded(
                    &info,
                    total,
                    self.cfg.segment_size_bytes,
                    self.cfg.client_bandwidth_kbps,
                    &scfg,
                )
            }
            Err(_) => return self.terminal(s, TerminalStatus::FetchFailed, now, trace),
        };
        self.set_state(s, SessionState::Ready, now, trace);
        self.set_state(s, SessionState::Streaming, now, trace);
        SessionPoll::StartStream(Box::new(StreamSetup {
            plan,
            source: CacheSource { entry, job },
            video: s.video.clone(),
            variant: key.variant,
            total_bytes: total,
            segment_size: self.cfg.segment_size_bytes,
        }))
    }

    /// Advances the session as far as possible for this tick.
    pub fn poll_session(
        &self,
        s: &mut Session,
        now: Tick,
        starter: &mut dyn FetchStarter,
        trace: &mut dyn TraceSink,
    ) -> SessionPoll {
        loop {
            match s.state {
                SessionState::Received => {
                    self.set_state(s, SessionState::IndexLookup, now, trace);
                }
                SessionState::IndexLookup => {
                    let route = if self.no_cache {
                        None
                    } else {
                        self.index_decision(&s.video, &s.profile)
                    };
                    match route {
                        Some(r) => {
                            self.classify(s, PathClass::Hit);
                            s.route = Some(r);
                            self.set_state(s, SessionState::CacheHit, now, trace);
                        }
                        None => {
                            self.set_state(s, SessionState::CacheMiss, now, trace);
                        }
                    }
                }
                SessionState::CacheHit => {
                    self.set_state(s, SessionState::FormatCheck, now, trace);
                }
                SessionState::FormatCheck => {
                    // Hit path only; the fetch path transitions out of
                    // Fetching directly once the header is decisive.
                    match s.route.take() {
                        Some(HitRoute::Direct(key)) => {
                            let cache = self.cache.clone();
                            return self.start_stream(s, &cache, &key, None, now, trace);
                        }
                        Some(HitRoute::TranscodeFrom(key)) => {
                            self.set_state(s, SessionState::Transcoding, now, trace);
                            s.route = Some(HitRoute::TranscodeFrom(key));
                        }
                        None => {
                            return self.terminal(s, TerminalStatus::FetchFailed, now, trace)
                        }
                    }
                }
                SessionState::Transcoding => {
                    let Some(HitRoute::TranscodeFrom(key)) = s.route.take() else {
                        return self.terminal(s, TerminalStatus::FetchFailed, now, trace);
                    };
                    let src_store = match &s.job {
                        Some(job) => job.dest().map(|d| d.store).unwrap_or_else(|| self.cache.clone()),
                        None => self.cache.clone(),
                    };
                    match self.materialize_variant(&src_store, &key, s, now, trace) {
                        Ok((store, vkey)) => {
                            return self.start_stream(s, &store, &vkey, None, now, trace);
                        }
                        Err(status) => return self.terminal(s, status, now, trace),
                    }
                }
                SessionState::CacheMiss => {
                    self.set_state(s, SessionState::HostLookup, now, trace);
                }
                SessionState::HostLookup => {
                    let hosts = self.registry.find_hosts(&s.video, now);
                    if self.no_cache {
                        if hosts.is_empty() {
                            return self.terminal(s, TerminalStatus::NotFound, now, trace);
                        }
                        self.classify(s, PathClass::Miss);
                        let job = JobState::detached(s.video.clone());
                        starter.start(job.clone(), hosts, CacheStore::new(None));
                        s.job = Some(job);
                        self.set_state(s, SessionState::NodeSelected, now, trace);
                        continue;
                    }
                    match self.jobs.join_or_claim(&s.video) {
                        JobTicket::Joined(job) => {
                            self.classify(s, PathClass::Miss);
                            s.job = Some(job);
                            self.set_state(s, SessionState::NodeSelected, now, trace);
                        }
                        JobTicket::Claimed(job) => {
                            if hosts.is_empty() {
                                self.jobs.finish(
                                    &job,
                                    JobStatus::Failed("no hosting nodes".into()),
                                );
                                return self.terminal(s, TerminalStatus::NotFound, now, trace);
                            }
                            self.classify(s, PathClass::Miss);
                            starter.start(job.clone(), hosts, self.cache.clone());
                            s.job = Some(job);
                            self.set_state(s, SessionState::NodeSelected, now, trace);
                        }
                    }
                }
                SessionState::NodeSelected => {
                    self.set_state(s, SessionState::Fetching, now, trace);
                }
                SessionState::Fetching => {
                    let job = s.job.clone().expect("fetching session has a job");
                    if !s.announced_node {
                        if let Some(node) = job.node() {
                            s.selected_node = Some(node.clone());
                            trace.node_selected(s.id, &node, now);
                            s.announced_node = true;
                        }
                    }
                    match job.status() {
                        JobStatus::Failed(_) => {
                            return self.terminal(s, TerminalStatus::FetchFailed, now, trace);
                        }
                        JobStatus::Running | JobStatus::Done => {}
                    }
                    let Some(dest) = job.dest() else {
                        return SessionPoll::Pending;
                    };
                    // The job may have moved to a private store after a
                    // budget denial; follow it.
                    let stale_store = s
                        .entry_store
                        .as_ref()
                        .map(|st| !st.ptr_eq(&dest.store))
                        .unwrap_or(false);
                    if stale_store {
                        s.entry = None;
                    }
                    if s.entry.is_none() {
                        s.entry = dest.store.lookup(&dest.key, now);
                        s.entry_store = Some(dest.store.clone());
                    }
                    let Some(entry) = &s.entry else {
                        if job.status() == JobStatus::Running {
                            return SessionPoll::Pending;
                        }
                        return self.terminal(s, TerminalStatus::FetchFailed, now, trace);
                    };
                    if s.header.is_none() {
                        let head_len =
                            media::CONTAINER_HEADER_LEN.min(entry.total_bytes() as usize);
                        match entry.read_range(0, head_len) {
                            Ok(bytes) => match media::peek_header(&bytes) {
                                Ok(info) => s.header = Some(info),
                                Err(_) => {
                                    return self.terminal(
                                        s,
                                        TerminalStatus::FetchFailed,
                                        now,
                                        trace,
                                    )
                                }
                            },
                            Err(_) => {
                                // First segment not landed yet.
                                if job.status() == JobStatus::Running {
                                    return SessionPoll::Pending;
                                }
                                return self.terminal(s, TerminalStatus::FetchFailed, now, trace);
                            }
                        }
                    }
                    let info = s.header.expect("header just read");
                    if media::header_matches_profile(&info, &s.profile) {
                        // Stream while the fill continues.
                        self.set_state(s, SessionState::FormatCheck, now, trace);
                        let key = dest.key.clone();
                        return self.start_stream(s, &dest.store, &key, Some(job), now, trace);
                    }
                    // Needs transcoding: wait for the full rendition.
                    match entry.state() {
                        FillState::Complete => {
                            s.entry = None;
                            self.set_state(s, SessionState::FormatCheck, now, trace);
                            self.set_state(s, SessionState::Transcoding, now, trace);
                            s.route = Some(HitRoute::TranscodeFrom(dest.key.clone()));
                        }
                        FillState::Filling => {
                            if job.status() != JobStatus::Running {
                                return self.terminal(s, TerminalStatus::FetchFailed, now, trace);
                            }
                            return SessionPoll::Pending;
                        }
                    }
                }
                SessionState::Ready | SessionState::Streaming => {
                    // The driver owns the stream now.
                    return SessionPoll::Pending;
                }
                SessionState::NotFound | SessionState::Done | SessionState::Failed => {
                    return SessionPoll::Pending;
                }
            }
        }
    }

    /// Records the outcome of a finished stream and closes the session.
    /// `error` is set when the stream ended before delivering everything;
    /// whatever bytes did reach the client still count.
    pub fn finish_session(
        &self,
        s: &mut Session,
        progress: &StreamProgress,
        error: Option<&StreamError>,
        now: Tick,
        trace: &mut dyn TraceSink,
    ) {
        {
            let mut m = self.metrics.inner.lock().unwrap();
            m.client_bytes += progress.bytes_sent;
            if error.is_none() {
                m.stall_time.push(progress.total_stall_ticks());
                if let Some(first) = progress.first_byte_at {
                    let delay = first.saturating_sub(s.arrival);
                    match s.class {
                        Some(PathClass::Hit) => m.startup_delay_hit.push(delay),
                        Some(PathClass::Miss) => m.startup_delay_miss.push(delay),
                        _ => {}
                    }
                }
            } else {
                m.failed += 1;
            }
        }
        match error {
            None => {
                self.set_state(s, SessionState::Done, now, trace);
                trace.status(s.id, "OK", now);
            }
            Some(e) => {
                self.set_state(s, SessionState::Failed, now, trace);
                let code = match e {
                    StreamError::ClientDisconnected => "DISCONNECTED",
                    _ => protocol::STATUS_FETCH_FAILED,
                };
                trace.status(s.id, code, now);
            }
        }
    }

    pub fn snapshot_metrics(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }
}

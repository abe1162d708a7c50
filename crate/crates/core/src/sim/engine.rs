//! The discrete-time engine.
//!
//! Everything advances on a single virtual clock, one tick at a time, in a
//! fixed phase order: telemetry, node service and response delivery,
//! session progression, request arrivals. All iteration orders are fixed
//! (nodes by config order, jobs and sessions by id), so a config and seed
//! fully determine the event log.
//!
//! Fetch jobs run the same `run_fetch_job` code as the live server. Each
//! job lives on its own thread but executes in lockstep with the engine:
//! the thread parks on a channel whenever it issues a transport request,
//! and the engine resumes it only when handing over the scheduled response
//! — between those points exactly one party is running, so shared state
//! never sees a racy interleaving.

use super::config::{SimConfig, SimNodeSpec, VideoSpec};
use super::report::SimReport;
use super::workload::{generate_workload, Request};
use super::SimError;
use crate::cache::{CacheKey, CacheStore};
use crate::clock::{ms_to_ticks, Clock, ManualClock, Tick};
use crate::fetch::{
    run_fetch_job, FetchError, FetchObserver, JobState, JobStatus, OriginTransport,
};
use crate::gateway::{
    FetchStarter, Gateway, PathClass, SessionPoll, SessionState, StreamSetup, TraceSink,
};
use crate::ids::{NodeId, ProfileId, VideoId};
use crate::media::{encode_container, DeviceProfile, FormatVariantKey, VideoAsset};
use crate::registry::{NodeRecord, TelemetryMsg};
use crate::stream::{
    CacheSource, DeliverySink, StreamError, StreamMachine, StreamStatus,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Baseline mode: no shared cache, no request coalescing.
    pub no_cache: bool,
}

/// Result of one run: the aggregate report plus the full event log, one
/// JSON object per line.
pub struct SimRun {
    pub report: SimReport,
    pub events: Vec<String>,
}

pub fn run_simulation(cfg: &SimConfig, opts: &RunOptions) -> Result<SimRun, SimError> {
    cfg.validate()?;
    Engine::new(cfg, opts)?.run()
}

// ---------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EventBody<'a> {
    Request {
        session: u64,
        video: &'a str,
        profile: &'a str,
    },
    Transition {
        session: u64,
        from: &'a str,
        to: &'a str,
    },
    NodeSelected {
        session: u64,
        node: &'a str,
    },
    Telemetry {
        node: &'a str,
    },
    SizeRequest {
        job: u64,
        node: &'a str,
        video: &'a str,
    },
    SizeResponse {
        job: u64,
        node: &'a str,
        video: &'a str,
        total: u64,
    },
    RangeRequest {
        job: u64,
        node: &'a str,
        video: &'a str,
        start: u64,
        end: u64,
    },
    RangeResponse {
        job: u64,
        node: &'a str,
        video: &'a str,
        bytes: u64,
    },
    RequestFailed {
        job: u64,
        node: &'a str,
        video: &'a str,
        error: &'a str,
    },
    RequestTimeout {
        job: u64,
        node: &'a str,
        video: &'a str,
    },
    SegmentWrite {
        video: &'a str,
        variant: String,
        index: u32,
        complete: bool,
    },
    BudgetFallback {
        video: &'a str,
    },
    Evict {
        video: &'a str,
        variant: String,
    },
    Transcode {
        session: u64,
        video: &'a str,
        from: String,
        to: String,
    },
    FetchDone {
        job: u64,
        video: &'a str,
    },
    FetchFailed {
        job: u64,
        video: &'a str,
        reason: &'a str,
    },
    FirstByte {
        session: u64,
    },
    SegmentSent {
        session: u64,
        index: u32,
    },
    StallStart {
        session: u64,
    },
    StallEnd {
        session: u64,
        ticks: u64,
    },
    Status {
        session: u64,
        code: &'a str,
    },
    SessionDone {
        session: u64,
        outcome: &'a str,
        startup_ticks: Option<u64>,
        stall_ticks: u64,
    },
}

#[derive(Serialize)]
struct Event<'a> {
    tick: u64,
    #[serde(flatten)]
    body: EventBody<'a>,
}

/// Shared, clock-stamped event sink. Job threads write to it only while
/// the engine is parked waiting on them, so line order is deterministic.
struct LogSink {
    clock: Arc<ManualClock>,
    lines: Mutex<Vec<String>>,
}

impl LogSink {
    fn emit(&self, body: EventBody<'_>) {
        let line = serde_json::to_string(&Event {
            tick: self.clock.now().0,
            body,
        })
        .expect("event serializes");
        self.lines.lock().unwrap().push(line);
    }
}

// ---------------------------------------------------------------------
// Lockstep job scheduling
// ---------------------------------------------------------------------

enum JobMsg {
    Started {
        job: usize,
    },
    Connect {
        job: usize,
        node: NodeId,
    },
    Size {
        job: usize,
        node: NodeId,
        video: VideoId,
    },
    Range {
        job: usize,
        node: NodeId,
        video: VideoId,
        start: u64,
        end: u64,
    },
    Done {
        job: usize,
    },
}

impl JobMsg {
    fn job(&self) -> usize {
        match self {
            JobMsg::Started { job }
            | JobMsg::Connect { job, .. }
            | JobMsg::Size { job, .. }
            | JobMsg::Range { job, .. }
            | JobMsg::Done { job } => *job,
        }
    }
}

enum JobReply {
    Go,
    Connected,
    Size(Result<u64, FetchError>),
    Range(Result<Vec<u8>, FetchError>),
}

/// Transport used inside sim fetch threads: every call is a message to the
/// engine followed by a park until the engine delivers the reply.
struct SimTransport<'a> {
    job: usize,
    node: NodeId,
    tx: &'a Sender<JobMsg>,
    rx: &'a Receiver<JobReply>,
}

impl SimTransport<'_> {
    fn engine_gone(&self) -> FetchError {
        FetchError::Transport {
            node: self.node.clone(),
            msg: "engine stopped".into(),
        }
    }
}

impl OriginTransport for SimTransport<'_> {
    fn node_id(&self) -> &NodeId {
        &self.node
    }

    fn size(&mut self, video: &VideoId) -> Result<u64, FetchError> {
        self.tx
            .send(JobMsg::Size {
                job: self.job,
                node: self.node.clone(),
                video: video.clone(),
            })
            .map_err(|_| self.engine_gone())?;
        match self.rx.recv() {
            Ok(JobReply::Size(r)) => r,
            _ => Err(self.engine_gone()),
        }
    }

    fn fetch_range(
        &mut self,
        video: &VideoId,
        start: u64,
        end: u64,
    ) -> Result<Vec<u8>, FetchError> {
        self.tx
            .send(JobMsg::Range {
                job: self.job,
                node: self.node.clone(),
                video: video.clone(),
                start,
                end,
            })
            .map_err(|_| self.engine_gone())?;
        match self.rx.recv() {
            Ok(JobReply::Range(r)) => r,
            _ => Err(self.engine_gone()),
        }
    }
}

struct SimFetchObserver {
    log: Arc<LogSink>,
    gateway: Arc<Gateway>,
}

impl FetchObserver for SimFetchObserver {
    fn on_range_request(&mut self, node: &NodeId, _video: &VideoId, _start: u64, _end: u64) {
        self.gateway.metrics.record_origin_request(node);
    }
    fn on_range_response(&mut self, _node: &NodeId, _video: &VideoId, len: u64) {
        self.gateway.metrics.record_origin_bytes(len);
    }
    fn on_segment(&mut self, key: &CacheKey, index: u32, _len: u64, complete: bool) {
        self.log.emit(EventBody::SegmentWrite {
            video: key.video.as_str(),
            variant: key.variant.to_string(),
            index,
            complete,
        });
    }
    fn on_evictions(&mut self, keys: &[CacheKey]) {
        for key in keys {
            self.log.emit(EventBody::Evict {
                video: key.video.as_str(),
                variant: key.variant.to_string(),
            });
        }
    }
    fn on_budget_fallback(&mut self, video: &VideoId) {
        self.log.emit(EventBody::BudgetFallback {
            video: video.as_str(),
        });
    }
}

struct Outstanding {
    seq: u64,
    deadline: u64,
    node: usize,
    video: VideoId,
}

struct JobRt {
    reply_tx: Sender<JobReply>,
    handle: Option<std::thread::JoinHandle<()>>,
    outstanding: Option<Outstanding>,
    next_seq: u64,
    done: bool,
}

// ---------------------------------------------------------------------
// Node model
// ---------------------------------------------------------------------

enum ReqKind {
    Size,
    Range { start: u64, end: u64 },
}

struct NodeRequest {
    job: usize,
    seq: u64,
    arrive_tick: u64,
    video: VideoId,
    kind: ReqKind,
}

struct Transfer {
    job: usize,
    seq: u64,
    video: VideoId,
    start: u64,
    end: u64,
    remaining_bits: u128,
}

struct NodeSim {
    id: NodeId,
    latency_ticks: u64,
    capacity_kbps: u64,
    assets: BTreeMap<VideoId, Arc<Vec<u8>>>,
    hosted: Vec<VideoId>,
    storage_bytes: u64,
    incoming: VecDeque<NodeRequest>,
    current: Option<Transfer>,
    range_responses_left: Option<u64>,
    telemetry_stop_tick: Option<u64>,
}

struct Delivery {
    job: usize,
    seq: u64,
    node: usize,
    video: VideoId,
    reply: JobReply,
}

// ---------------------------------------------------------------------
// Session runtime
// ---------------------------------------------------------------------

struct SessionRt {
    session: crate::gateway::Session,
    machine: Option<StreamMachine>,
    source: Option<CacheSource>,
    total_bytes: u64,
    segment_size: u32,
    done: bool,
}

/// Counts delivered bytes and remembers which segments completed during
/// one tick.
struct SimSink {
    total_bytes: u64,
    segment_size: u32,
    completed: Vec<u32>,
}

impl DeliverySink for SimSink {
    fn deliver(&mut self, seg: u32, off: u32, bytes: &[u8]) -> Result<(), StreamError> {
        let seg_len = crate::cache::segment_len(self.total_bytes, self.segment_size, seg);
        if off + bytes.len() as u32 == seg_len {
            self.completed.push(seg);
        }
        Ok(())
    }
    fn finish(&mut self) -> Result<(), StreamError> {
        Ok(())
    }
}

/// Routes gateway trace callbacks into the event log.
struct SimTrace {
    log: Arc<LogSink>,
}

impl TraceSink for SimTrace {
    fn transition(&mut self, session: u64, from: SessionState, to: SessionState, _now: Tick) {
        self.log.emit(EventBody::Transition {
            session,
            from: from.as_str(),
            to: to.as_str(),
        });
    }
    fn node_selected(&mut self, session: u64, node: &NodeId, _now: Tick) {
        self.log.emit(EventBody::NodeSelected {
            session,
            node: node.as_str(),
        });
    }
    fn transcoded(
        &mut self,
        session: u64,
        video: &VideoId,
        from: &FormatVariantKey,
        to: &FormatVariantKey,
        _now: Tick,
    ) {
        self.log.emit(EventBody::Transcode {
            session,
            video: video.as_str(),
            from: from.to_string(),
            to: to.to_string(),
        });
    }
    fn evictions(&mut self, keys: &[CacheKey], _now: Tick) {
        for key in keys {
            self.log.emit(EventBody::Evict {
                video: key.video.as_str(),
                variant: key.variant.to_string(),
            });
        }
    }
    fn status(&mut self, session: u64, code: &str, _now: Tick) {
        self.log.emit(EventBody::Status { session, code });
    }
}

/// Registers new fetch jobs with the lockstep scheduler.
struct SimStarter<'a> {
    jobs: &'a mut Vec<JobRt>,
    pending_start: &'a mut VecDeque<usize>,
    msg_tx: &'a Sender<JobMsg>,
    clock: Arc<ManualClock>,
    gateway: Arc<Gateway>,
    log: Arc<LogSink>,
    seed: u64,
    segment_size: u32,
}

impl FetchStarter for SimStarter<'_> {
    fn start(&mut self, job: Arc<JobState>, candidates: Vec<NodeRecord>, dest: CacheStore) {
        let job_idx = self.jobs.len();
        let (reply_tx, reply_rx) = channel::<JobReply>();
        let msg_tx = self.msg_tx.clone();
        let clock = self.clock.clone();
        let gateway = self.gateway.clone();
        let log = self.log.clone();
        let seed = self
            .seed
            .wrapping_add((job_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let segment_size = self.segment_size;
        let tabled = !gateway.no_cache();

        let job_for_thread = job;
        let handle = std::thread::spawn(move || {
            if msg_tx.send(JobMsg::Started { job: job_idx }).is_err() {
                return;
            }
            if reply_rx.recv().is_err() {
                return;
            }
            let connect = |rec: &NodeRecord| -> Result<Box<dyn OriginTransport + '_>, FetchError> {
                if msg_tx
                    .send(JobMsg::Connect {
                        job: job_idx,
                        node: rec.node_id.clone(),
                    })
                    .is_err()
                {
                    return Err(FetchError::Transport {
                        node: rec.node_id.clone(),
                        msg: "engine stopped".into(),
                    });
                }
                match reply_rx.recv() {
                    Ok(JobReply::Connected) => Ok(Box::new(SimTransport {
                        job: job_idx,
                        node: rec.node_id.clone(),
                        tx: &msg_tx,
                        rx: &reply_rx,
                    })),
                    _ => Err(FetchError::Transport {
                        node: rec.node_id.clone(),
                        msg: "engine stopped".into(),
                    }),
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut observer = SimFetchObserver {
                log: log.clone(),
                gateway: gateway.clone(),
            };
            let result = run_fetch_job(
                &job_for_thread,
                candidates,
                &connect,
                &dest,
                segment_size,
                clock.as_ref(),
                &mut rng,
                &mut observer,
            );
            let status = match &result {
                Ok(_) => JobStatus::Done,
                Err(e) => JobStatus::Failed(e.to_string()),
            };
            if tabled {
                gateway.jobs.finish(&job_for_thread, status);
            } else {
                job_for_thread.finish_detached(status);
            }
            match &result {
                Ok(_) => log.emit(EventBody::FetchDone {
                    job: job_idx as u64,
                    video: job_for_thread.video().as_str(),
                }),
                Err(e) => log.emit(EventBody::FetchFailed {
                    job: job_idx as u64,
                    video: job_for_thread.video().as_str(),
                    reason: &e.to_string(),
                }),
            }
            let _ = msg_tx.send(JobMsg::Done { job: job_idx });
        });

        self.jobs.push(JobRt {
            reply_tx,
            handle: Some(handle),
            outstanding: None,
            next_seq: 0,
            done: false,
        });
        self.pending_start.push_back(job_idx);
    }
}

// ---------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------

/// Synthesizes a catalog video: payload bytes are a pure function of
/// (seed, video id), so origin content is reproducible across runs and
/// matches containers written by `gen-catalog`.
pub fn synthesize_asset(spec: &VideoSpec, content_seed: u64) -> VideoAsset {
    let mut h = Sha256::new();
    h.update(content_seed.to_le_bytes());
    h.update(spec.id.as_bytes());
    let digest = h.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = crate::media::frame_size_bytes(spec.width, spec.height) as usize
        * spec.frame_count as usize;
    let mut payload = vec![0u8; len];
    rand::RngCore::fill_bytes(&mut rng, &mut payload);
    VideoAsset::new(
        VideoId::new(spec.id.as_str()),
        spec.codec_id,
        spec.width,
        spec.height,
        spec.fps,
        spec.frame_count,
        payload,
    )
    .expect("catalog spec validated")
}

struct Engine {
    cfg: SimConfig,
    no_cache: bool,
    clock: Arc<ManualClock>,
    gateway: Arc<Gateway>,
    log: Arc<LogSink>,
    nodes: Vec<NodeSim>,
    node_index: BTreeMap<NodeId, usize>,
    jobs: Vec<JobRt>,
    pending_start: VecDeque<usize>,
    msg_tx: Sender<JobMsg>,
    msg_rx: Receiver<JobMsg>,
    inbox: VecDeque<JobMsg>,
    deliveries: BTreeMap<u64, Vec<Delivery>>,
    sessions: Vec<Option<SessionRt>>,
    trace: Vec<Request>,
    next_request: usize,
    original_sizes: BTreeMap<VideoId, u64>,
    origin_equivalent_bytes: u64,
    total_stall_ticks: u64,
    timeout_ticks: u64,
    telemetry_interval_ticks: u64,
}

impl Engine {
    fn new(cfg: &SimConfig, opts: &RunOptions) -> Result<Engine, SimError> {
        let clock = Arc::new(ManualClock::new(Tick(0)));
        let mut gw = Gateway::new(cfg.gateway_config());
        gw.set_no_cache(opts.no_cache);
        for p in &cfg.profiles {
            let profile = DeviceProfile::new(
                ProfileId::new(p.id.as_str()),
                p.codec_id,
                p.width,
                p.height,
                p.max_fps,
            )
            .map_err(|e| SimError::ConfigInvalid(format!("profiles.{}: {e}", p.id)))?;
            gw.add_profile(profile);
        }
        let gateway = Arc::new(gw);

        let mut containers: BTreeMap<VideoId, Arc<Vec<u8>>> = BTreeMap::new();
        let mut original_sizes = BTreeMap::new();
        for spec in &cfg.catalog {
            let asset = synthesize_asset(spec, cfg.seed);
            let bytes = Arc::new(encode_container(&asset));
            original_sizes.insert(asset.video_id.clone(), bytes.len() as u64);
            containers.insert(asset.video_id.clone(), bytes);
        }

        let mut nodes = Vec::new();
        let mut node_index = BTreeMap::new();
        for spec in &cfg.nodes {
            let node = build_node(spec, &containers, cfg.tick_ms);
            gateway
                .registry
                .register(
                    node.id.clone(),
                    format!("sim://{}", spec.id),
                    spec.latency_ms * 2,
                    spec.signal_db,
                    Tick(0),
                )
                .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
            node_index.insert(node.id.clone(), nodes.len());
            nodes.push(node);
        }

        let (msg_tx, msg_rx) = channel();
        let log = Arc::new(LogSink {
            clock: clock.clone(),
            lines: Mutex::new(Vec::new()),
        });
        let gcfg = gateway.config();
        let timeout_ticks = gcfg.fetch_timeout_ticks().max(1);
        let telemetry_interval_ticks =
            (u64::from(gcfg.telemetry_interval_s) * gcfg.ticks_per_second()).max(1);

        Ok(Engine {
            trace: generate_workload(cfg),
            cfg: cfg.clone(),
            no_cache: opts.no_cache,
            clock,
            gateway,
            log,
            nodes,
            node_index,
            jobs: Vec::new(),
            pending_start: VecDeque::new(),
            msg_tx,
            msg_rx,
            inbox: VecDeque::new(),
            deliveries: BTreeMap::new(),
            sessions: Vec::new(),
            next_request: 0,
            original_sizes,
            origin_equivalent_bytes: 0,
            total_stall_ticks: 0,
            timeout_ticks,
            telemetry_interval_ticks,
        })
    }

    fn run(mut self) -> Result<SimRun, SimError> {
        let hard_cap = self.cfg.duration_ticks + 10_000_000;
        let mut now = 0u64;
        loop {
            self.clock.set(Tick(now));
            self.telemetry_phase(now);
            self.node_phase(now);
            self.session_phase(now);
            self.arrival_phase(now);
            if self.quiescent() {
                break;
            }
            if now > hard_cap {
                return Err(SimError::Runaway);
            }
            now += 1;
        }
        if let Some(dir) = &self.cfg.service.cache_dir {
            if !self.no_cache {
                if let Err(e) = self.gateway.cache.save_manifest(dir) {
                    log::warn!("sim: manifest save failed: {e}");
                }
            }
        }
        Ok(self.into_run(now))
    }

    fn quiescent(&self) -> bool {
        self.next_request == self.trace.len()
            && self.deliveries.is_empty()
            && self.pending_start.is_empty()
            && self.jobs.iter().all(|j| j.done)
            && self
                .sessions
                .iter()
                .all(|s| s.as_ref().map(|s| s.done).unwrap_or(true))
            && self.nodes.iter().all(|n| n.incoming.is_empty() && n.current.is_none())
    }

    // ----- phases ------------------------------------------------------

    fn telemetry_phase(&mut self, now: u64) {
        if !now.is_multiple_of(self.telemetry_interval_ticks) {
            return;
        }
        for node in &self.nodes {
            if node.telemetry_stop_tick.map(|t| now >= t).unwrap_or(false) {
                continue;
            }
            let msg = TelemetryMsg {
                node_id: node.id.clone(),
                ts: now,
                capacity_kbps: node.capacity_kbps,
                storage_bytes: node.storage_bytes,
                add_videos: node.hosted.clone(),
                remove_videos: vec![],
            };
            if let Err(e) = self.gateway.registry.apply_telemetry(&msg) {
                log::warn!("sim telemetry: {e}");
            }
            self.log.emit(EventBody::Telemetry {
                node: node.id.as_str(),
            });
        }
    }

    fn node_phase(&mut self, now: u64) {
        // Service: per node, spend this tick's bit budget on the transfer
        // queue, FIFO.
        for idx in 0..self.nodes.len() {
            let tick_ms = u128::from(self.cfg.tick_ms);
            let mut budget = u128::from(self.nodes[idx].capacity_kbps) * tick_ms;
            loop {
                if self.nodes[idx].current.is_none() {
                    let due = self.nodes[idx]
                        .incoming
                        .front()
                        .map(|r| r.arrive_tick <= now)
                        .unwrap_or(false);
                    if !due {
                        break;
                    }
                    let req = self.nodes[idx].incoming.pop_front().unwrap();
                    self.admit_request(idx, req, now);
                    continue;
                }
                if budget == 0 {
                    break;
                }
                let finished = {
                    let tr = self.nodes[idx].current.as_mut().unwrap();
                    let spend = budget.min(tr.remaining_bits);
                    tr.remaining_bits -= spend;
                    budget -= spend;
                    tr.remaining_bits == 0
                };
                if finished {
                    let tr = self.nodes[idx].current.take().unwrap();
                    self.complete_transfer(idx, tr, now);
                }
            }
        }

        // Deliver responses scheduled for this tick, then fire timeouts.
        if let Some(due) = self.deliveries.remove(&now) {
            for d in due {
                self.deliver(d, now);
            }
        }
        for job_idx in 0..self.jobs.len() {
            let fire = match (&self.jobs[job_idx].done, &self.jobs[job_idx].outstanding) {
                (false, Some(o)) => o.deadline <= now,
                _ => false,
            };
            if fire {
                let o = self.jobs[job_idx].outstanding.take().unwrap();
                let node_id = self.nodes[o.node].id.clone();
                self.log.emit(EventBody::RequestTimeout {
                    job: job_idx as u64,
                    node: node_id.as_str(),
                    video: o.video.as_str(),
                });
                let _ = self.jobs[job_idx]
                    .reply_tx
                    .send(JobReply::Range(Err(FetchError::NodeTimeout(node_id))));
                self.await_activity(job_idx, now);
            }
        }
    }

    fn admit_request(&mut self, node_idx: usize, req: NodeRequest, now: u64) {
        let node = &mut self.nodes[node_idx];
        match req.kind {
            ReqKind::Size => {
                let result = node
                    .assets
                    .get(&req.video)
                    .map(|b| b.len() as u64)
                    .ok_or_else(|| FetchError::NotFoundAtNode(node.id.clone()));
                let tick = (now + node.latency_ticks).max(now + 1);
                self.deliveries.entry(tick).or_default().push(Delivery {
                    job: req.job,
                    seq: req.seq,
                    node: node_idx,
                    video: req.video,
                    reply: JobReply::Size(result),
                });
            }
            ReqKind::Range { start, end } => match node.assets.get(&req.video) {
                None => {
                    let tick = (now + node.latency_ticks).max(now + 1);
                    self.deliveries.entry(tick).or_default().push(Delivery {
                        job: req.job,
                        seq: req.seq,
                        node: node_idx,
                        video: req.video,
                        reply: JobReply::Range(Err(FetchError::NotFoundAtNode(node.id.clone()))),
                    });
                }
                Some(bytes) if start > end || end >= bytes.len() as u64 => {
                    let tick = (now + node.latency_ticks).max(now + 1);
                    self.deliveries.entry(tick).or_default().push(Delivery {
                        job: req.job,
                        seq: req.seq,
                        node: node_idx,
                        video: req.video,
                        reply: JobReply::Range(Err(FetchError::RangeRejected {
                            node: node.id.clone(),
                            start,
                            end,
                        })),
                    });
                }
                Some(_) => {
                    node.current = Some(Transfer {
                        job: req.job,
                        seq: req.seq,
                        video: req.video,
                        start,
                        end,
                        remaining_bits: u128::from(end - start + 1) * 8,
                    });
                }
            },
        }
    }

    fn complete_transfer(&mut self, node_idx: usize, tr: Transfer, now: u64) {
        let node = &mut self.nodes[node_idx];
        if let Some(left) = &mut node.range_responses_left {
            if *left == 0 {
                // Fault injection: the response is lost; the job times out.
                return;
            }
            *left -= 1;
        }
        let payload =
            node.assets.get(&tr.video).expect("transfer has asset")[tr.start as usize..=tr.end as usize].to_vec();
        let tick = (now + node.latency_ticks).max(now + 1);
        self.deliveries.entry(tick).or_default().push(Delivery {
            job: tr.job,
            seq: tr.seq,
            node: node_idx,
            video: tr.video,
            reply: JobReply::Range(Ok(payload)),
        });
    }

    fn deliver(&mut self, d: Delivery, now: u64) {
        let stale = match &self.jobs[d.job].outstanding {
            Some(o) => o.seq != d.seq,
            None => true,
        };
        if self.jobs[d.job].done || stale {
            return;
        }
        let node_id = self.nodes[d.node].id.clone();
        match &d.reply {
            JobReply::Size(Ok(total)) => self.log.emit(EventBody::SizeResponse {
                job: d.job as u64,
                node: node_id.as_str(),
                video: d.video.as_str(),
                total: *total,
            }),
            JobReply::Range(Ok(bytes)) => self.log.emit(EventBody::RangeResponse {
                job: d.job as u64,
                node: node_id.as_str(),
                video: d.video.as_str(),
                bytes: bytes.len() as u64,
            }),
            JobReply::Size(Err(e)) | JobReply::Range(Err(e)) => {
                self.log.emit(EventBody::RequestFailed {
                    job: d.job as u64,
                    node: node_id.as_str(),
                    video: d.video.as_str(),
                    error: &e.to_string(),
                })
            }
            _ => {}
        }
        self.jobs[d.job].outstanding = None;
        let _ = self.jobs[d.job].reply_tx.send(d.reply);
        self.await_activity(d.job, now);
    }

    /// Receives the next message from a specific job, buffering `Started`
    /// messages from other (newly spawned) jobs.
    fn next_msg_from(&mut self, job: usize) -> Option<JobMsg> {
        if let Some(pos) = self.inbox.iter().position(|m| m.job() == job) {
            return self.inbox.remove(pos);
        }
        loop {
            match self.msg_rx.recv() {
                Ok(msg) if msg.job() == job => return Some(msg),
                Ok(msg) => self.inbox.push_back(msg),
                Err(_) => return None,
            }
        }
    }

    /// Runs one job's turn until it parks on a transport request or exits.
    fn await_activity(&mut self, job: usize, now: u64) {
        loop {
            let Some(msg) = self.next_msg_from(job) else {
                self.jobs[job].done = true;
                return;
            };
            match msg {
                JobMsg::Started { .. } => unreachable!("job already started"),
                JobMsg::Connect { node, .. } => {
                    debug_assert!(self.node_index.contains_key(&node));
                    let _ = self.jobs[job].reply_tx.send(JobReply::Connected);
                }
                JobMsg::Size { node, video, .. } => {
                    let node_idx = self.node_index[&node];
                    self.log.emit(EventBody::SizeRequest {
                        job: job as u64,
                        node: node.as_str(),
                        video: video.as_str(),
                    });
                    self.enqueue_request(job, node_idx, video, ReqKind::Size, now);
                    return;
                }
                JobMsg::Range {
                    node,
                    video,
                    start,
                    end,
                    ..
                } => {
                    let node_idx = self.node_index[&node];
                    self.log.emit(EventBody::RangeRequest {
                        job: job as u64,
                        node: node.as_str(),
                        video: video.as_str(),
                        start,
                        end,
                    });
                    self.enqueue_request(job, node_idx, video, ReqKind::Range { start, end }, now);
                    return;
                }
                JobMsg::Done { .. } => {
                    self.jobs[job].done = true;
                    if let Some(handle) = self.jobs[job].handle.take() {
                        let _ = handle.join();
                    }
                    return;
                }
            }
        }
    }

    fn enqueue_request(
        &mut self,
        job: usize,
        node_idx: usize,
        video: VideoId,
        kind: ReqKind,
        now: u64,
    ) {
        let seq = self.jobs[job].next_seq;
        self.jobs[job].next_seq += 1;
        let arrive = (now + self.nodes[node_idx].latency_ticks).max(now + 1);
        self.jobs[job].outstanding = Some(Outstanding {
            seq,
            deadline: now + self.timeout_ticks,
            node: node_idx,
            video: video.clone(),
        });
        self.nodes[node_idx].incoming.push_back(NodeRequest {
            job,
            seq,
            arrive_tick: arrive,
            video,
            kind,
        });
    }

    fn pump_pending_starts(&mut self, now: u64) {
        while let Some(job) = self.pending_start.pop_front() {
            match self.next_msg_from(job) {
                Some(JobMsg::Started { .. }) => {
                    let _ = self.jobs[job].reply_tx.send(JobReply::Go);
                    self.await_activity(job, now);
                }
                _ => {
                    self.jobs[job].done = true;
                }
            }
        }
    }

    fn session_phase(&mut self, now: u64) {
        for i in 0..self.sessions.len() {
            let Some(mut srt) = self.sessions[i].take() else {
                continue;
            };
            if srt.done {
                self.sessions[i] = Some(srt);
                continue;
            }
            if srt.machine.is_some() {
                self.drive_stream(&mut srt, now);
            } else {
                let mut trace = SimTrace {
                    log: self.log.clone(),
                };
                let poll = {
                    let mut starter = SimStarter {
                        jobs: &mut self.jobs,
                        pending_start: &mut self.pending_start,
                        msg_tx: &self.msg_tx,
                        clock: self.clock.clone(),
                        gateway: self.gateway.clone(),
                        log: self.log.clone(),
                        seed: self.cfg.seed,
                        segment_size: self.cfg.service.segment_size_bytes,
                    };
                    self.gateway
                        .poll_session(&mut srt.session, Tick(now), &mut starter, &mut trace)
                };
                self.pump_pending_starts(now);
                match poll {
                    SessionPoll::Pending => {}
                    SessionPoll::Terminal(status) => {
                        srt.done = true;
                        let outcome = match status {
                            crate::gateway::TerminalStatus::NotFound => "not_found",
                            _ => "failed",
                        };
                        self.log.emit(EventBody::SessionDone {
                            session: srt.session.id,
                            outcome,
                            startup_ticks: None,
                            stall_ticks: 0,
                        });
                    }
                    SessionPoll::StartStream(setup) => {
                        let StreamSetup {
                            plan,
                            source,
                            total_bytes,
                            segment_size,
                            ..
                        } = *setup;
                        srt.machine = Some(StreamMachine::new(plan, Tick(now)));
                        srt.source = Some(source);
                        srt.total_bytes = total_bytes;
                        srt.segment_size = segment_size;
                        self.drive_stream(&mut srt, now);
                    }
                }
            }
            self.sessions[i] = Some(srt);
        }
    }

    fn drive_stream(&mut self, srt: &mut SessionRt, now: u64) {
        let machine = srt.machine.as_mut().expect("stream machine present");
        let source = srt.source.as_ref().expect("stream source present");
        let mut sink = SimSink {
            total_bytes: srt.total_bytes,
            segment_size: srt.segment_size,
            completed: Vec::new(),
        };
        let had_first_byte = machine.progress().first_byte_at.is_some();
        let stalls_before = machine.progress().stall_events.len();
        let stall_open_before = machine.stall_open_since().is_some();

        let status = machine.on_tick(Tick(now), source, &mut sink);

        if !had_first_byte && machine.progress().first_byte_at.is_some() {
            self.log.emit(EventBody::FirstByte {
                session: srt.session.id,
            });
        }
        for seg in sink.completed {
            self.log.emit(EventBody::SegmentSent {
                session: srt.session.id,
                index: seg,
            });
        }
        for ev in &machine.progress().stall_events[stalls_before..] {
            self.log.emit(EventBody::StallEnd {
                session: srt.session.id,
                ticks: ev.ticks,
            });
        }
        if !stall_open_before && machine.stall_open_since().is_some() {
            self.log.emit(EventBody::StallStart {
                session: srt.session.id,
            });
        }

        let finished = match status {
            StreamStatus::Finished => Some(None),
            StreamStatus::Failed(e) => Some(Some(e)),
            _ => None,
        };
        if let Some(error) = finished {
            let progress = machine.progress().clone();
            let mut trace = SimTrace {
                log: self.log.clone(),
            };
            self.gateway.finish_session(
                &mut srt.session,
                &progress,
                error.as_ref(),
                Tick(now),
                &mut trace,
            );
            self.total_stall_ticks += progress.total_stall_ticks();
            if error.is_none() {
                if let Some(size) = self.original_sizes.get(&srt.session.video) {
                    if matches!(
                        srt.session.class,
                        Some(PathClass::Hit) | Some(PathClass::Miss)
                    ) {
                        self.origin_equivalent_bytes += size;
                    }
                }
            }
            let startup_ticks = progress
                .first_byte_at
                .map(|t| t.saturating_sub(srt.session.arrival));
            self.log.emit(EventBody::SessionDone {
                session: srt.session.id,
                outcome: if error.is_none() { "done" } else { "failed" },
                startup_ticks,
                stall_ticks: progress.total_stall_ticks(),
            });
            srt.machine = None;
            srt.source = None;
            srt.done = true;
        }
    }

    fn arrival_phase(&mut self, now: u64) {
        while self.next_request < self.trace.len() && self.trace[self.next_request].tick.0 <= now {
            let req = &self.trace[self.next_request];
            self.next_request += 1;
            match self
                .gateway
                .begin_session(req.video.clone(), &req.profile, Tick(now))
            {
                Ok(session) => {
                    self.log.emit(EventBody::Request {
                        session: session.id,
                        video: req.video.as_str(),
                        profile: req.profile.as_str(),
                    });
                    self.sessions.push(Some(SessionRt {
                        session,
                        machine: None,
                        source: None,
                        total_bytes: 0,
                        segment_size: 0,
                        done: false,
                    }));
                }
                Err(e) => {
                    log::warn!("sim: dropping request: {e}");
                }
            }
        }
    }

    fn into_run(self, ticks_run: u64) -> SimRun {
        let m = self.gateway.snapshot_metrics();
        let unfinished = self
            .sessions
            .iter()
            .filter(|s| s.as_ref().map(|s| !s.done).unwrap_or(false))
            .count() as u64;
        let hit_rate = if m.requests > 0 {
            m.cache_hits as f64 / m.requests as f64
        } else {
            0.0
        };
        let bandwidth_saved_ratio = if self.origin_equivalent_bytes > 0 {
            (1.0 - m.origin_bytes as f64 / self.origin_equivalent_bytes as f64).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let report = SimReport {
            seed: self.cfg.seed,
            fingerprint: self.cfg.fingerprint(),
            no_cache: self.no_cache,
            requests: m.requests,
            cache_hits: m.cache_hits,
            cache_misses: m.cache_misses,
            not_found: m.not_found,
            failed: m.failed,
            unfinished,
            hit_rate,
            origin_bytes: m.origin_bytes,
            client_bytes: m.client_bytes,
            origin_equivalent_bytes: self.origin_equivalent_bytes,
            bandwidth_saved_ratio,
            transcode_count: m.transcode_count,
            startup_delay_hit: m.startup_delay_hit,
            startup_delay_miss: m.startup_delay_miss,
            total_stall_ticks: self.total_stall_ticks,
            per_node_fetches: m.origin_requests_per_node,
            ticks_run,
        };
        let events = std::mem::take(&mut *self.log.lines.lock().unwrap());
        SimRun { report, events }
    }
}

fn build_node(
    spec: &SimNodeSpec,
    containers: &BTreeMap<VideoId, Arc<Vec<u8>>>,
    tick_ms: u32,
) -> NodeSim {
    let mut assets = BTreeMap::new();
    let mut hosted = Vec::new();
    for id in &spec.hosted {
        let vid = VideoId::new(id.as_str());
        if let Some(bytes) = containers.get(&vid) {
            assets.insert(vid.clone(), bytes.clone());
        }
        hosted.push(vid);
    }
    NodeSim {
        id: NodeId::new(spec.id.as_str()),
        latency_ticks: ms_to_ticks(spec.latency_ms, u64::from(tick_ms)),
        capacity_kbps: spec.capacity_kbps,
        assets,
        hosted,
        storage_bytes: spec.storage_bytes,
        incoming: VecDeque::new(),
        current: None,
        range_responses_left: spec.drop_after_responses,
        telemetry_stop_tick: spec.telemetry_stop_tick,
    }
}

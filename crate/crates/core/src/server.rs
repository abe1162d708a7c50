//! Live mode: a TCP front end for the gateway.
//!
//! One thread per client connection; fetch jobs run on worker threads
//! through the same `run_fetch_job` path the simulator drives. Clients
//! speak the line protocol from [`crate::protocol`]; origin nodes send
//! telemetry as raw JSON lines on the same listener.

use crate::cache::CacheStore;
use crate::clock::{Clock, WallClock};
use crate::config::NodeRosterEntry;
use crate::fetch::{
    run_fetch_job, FetchObserver, JobState, OriginTransport, TcpOriginTransport,
};
use crate::gateway::{FetchStarter, Gateway, LogTrace, SessionPoll};
use crate::ids::{NodeId, VideoId};
use crate::protocol::{self, ClientRequest};
use crate::registry::{NodeRecord, RouteProber, TelemetryMsg};
use crate::stream::{DeliverySink, StreamError, StreamMachine, StreamStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Registers roster nodes. Until the first probe, the route time is twice
/// the configured one-way latency.
pub fn bootstrap_registry(gateway: &Gateway, roster: &[NodeRosterEntry]) {
    let now = crate::clock::Tick(0);
    for entry in roster {
        if let Err(e) = gateway.registry.register(
            entry.node_id.clone(),
            entry.address.clone(),
            entry.latency_ms * 2,
            entry.signal_db,
            now,
        ) {
            log::warn!("roster: {e}");
        }
    }
}

/// RTT probe over the origin protocol: one SIZE request round trip.
pub struct TcpRouteProber {
    pub timeout: Duration,
}

impl RouteProber for TcpRouteProber {
    fn probe_rtt_ms(&self, _node: &NodeId, address: &str) -> Option<u64> {
        let start = std::time::Instant::now();
        let stream = TcpStream::connect(address).ok()?;
        stream.set_read_timeout(Some(self.timeout)).ok()?;
        let mut reader = BufReader::new(stream);
        reader
            .get_mut()
            .write_all(b"SIZE __route_probe__\n")
            .ok()?;
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        if line.is_empty() {
            return None;
        }
        Some(start.elapsed().as_millis() as u64)
    }
}

struct LiveObserver {
    gateway: Arc<Gateway>,
}

impl FetchObserver for LiveObserver {
    fn on_range_request(&mut self, node: &NodeId, _video: &VideoId, _start: u64, _end: u64) {
        self.gateway.metrics.record_origin_request(node);
    }
    fn on_range_response(&mut self, _node: &NodeId, _video: &VideoId, len: u64) {
        self.gateway.metrics.record_origin_bytes(len);
    }
    fn on_budget_fallback(&mut self, video: &VideoId) {
        log::warn!("cache budget refused {video}; serving from a private store");
    }
}

/// Spawns fetch jobs on worker threads.
pub struct ThreadFetchStarter {
    gateway: Arc<Gateway>,
    clock: Arc<WallClock>,
    job_seq: Arc<AtomicU64>,
}

impl ThreadFetchStarter {
    pub fn new(gateway: Arc<Gateway>, clock: Arc<WallClock>) -> Self {
        Self {
            gateway,
            clock,
            job_seq: Arc::new(AtomicU64::new(0)),
        }
    }
}

impl FetchStarter for ThreadFetchStarter {
    fn start(&mut self, job: Arc<JobState>, candidates: Vec<NodeRecord>, dest: CacheStore) {
        let gateway = self.gateway.clone();
        let clock = self.clock.clone();
        let seq = self.job_seq.fetch_add(1, Ordering::SeqCst);
        std::thread::spawn(move || {
            let cfg = gateway.config().clone();
            let timeout = Duration::from_secs(u64::from(cfg.fetch_timeout_s));
            let connect = move |rec: &NodeRecord| -> Result<
                Box<dyn OriginTransport>,
                crate::fetch::FetchError,
            > {
                Ok(Box::new(TcpOriginTransport::new(
                    rec.node_id.clone(),
                    rec.address.clone(),
                    timeout,
                )))
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(seq));
            let mut observer = LiveObserver {
                gateway: gateway.clone(),
            };
            let result = run_fetch_job(
                &job,
                candidates,
                &connect,
                &dest,
                cfg.segment_size_bytes,
                clock.as_ref(),
                &mut rng,
                &mut observer,
            );
            let status = match &result {
                Ok(_) => crate::fetch::JobStatus::Done,
                Err(e) => crate::fetch::JobStatus::Failed(e.to_string()),
            };
            if gateway.no_cache() {
                job.finish_detached(status);
            } else {
                gateway.jobs.finish(&job, status);
            }
            if let Err(e) = &result {
                log::warn!("fetch job for {} failed: {e}", job.video());
            }
            if let Some(dir) = &cfg.cache_dir {
                if result.is_ok() && !gateway.no_cache() {
                    if let Err(e) = gateway.cache.save_manifest(dir) {
                        log::warn!("manifest save failed: {e}");
                    }
                }
            }
        });
    }
}

/// Frames delivered bytes onto a TCP stream: 4-byte big-endian length
/// before each segment, zero-length frame at the end.
struct FramedTcpSink<'a> {
    out: &'a mut TcpStream,
    total_bytes: u64,
    segment_size: u32,
}

impl FramedTcpSink<'_> {
    fn map_io(e: std::io::Error) -> StreamError {
        match e.kind() {
            std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted => StreamError::ClientDisconnected,
            _ => StreamError::SourceFailed(format!("client write: {e}")),
        }
    }
}

impl DeliverySink for FramedTcpSink<'_> {
    fn deliver(&mut self, seg: u32, off: u32, bytes: &[u8]) -> Result<(), StreamError> {
        if off == 0 {
            let len = crate::cache::segment_len(self.total_bytes, self.segment_size, seg);
            self.out
                .write_all(&len.to_be_bytes())
                .map_err(Self::map_io)?;
        }
        self.out.write_all(bytes).map_err(Self::map_io)
    }

    fn finish(&mut self) -> Result<(), StreamError> {
        protocol::write_end_frame(&mut self.out).map_err(Self::map_io)?;
        self.out.flush().map_err(Self::map_io)
    }
}

/// Runs the accept loop forever (or until the listener fails).
pub fn serve(gateway: Arc<Gateway>, listener: TcpListener) {
    let clock = Arc::new(WallClock::new(u64::from(gateway.config().tick_ms)));
    spawn_route_prober(gateway.clone(), clock.clone());
    log::info!(
        "listening on {}",
        listener
            .local_addr()
            .map(|a| a.to_string())
            .unwrap_or_default()
    );
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let gateway = gateway.clone();
                let clock = clock.clone();
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(gateway, clock, stream) {
                        log::debug!("connection ended: {e}");
                    }
                });
            }
            Err(e) => {
                log::error!("accept failed: {e}");
                return;
            }
        }
    }
}

/// Spawns `serve` in the background; returns the bound address.
pub fn spawn(gateway: Arc<Gateway>, listener: TcpListener) -> std::net::SocketAddr {
    let addr = listener.local_addr().expect("listener bound");
    std::thread::spawn(move || serve(gateway, listener));
    addr
}

fn spawn_route_prober(gateway: Arc<Gateway>, clock: Arc<WallClock>) {
    std::thread::spawn(move || {
        let interval = Duration::from_secs(u64::from(gateway.config().telemetry_interval_s.max(1)));
        let prober = TcpRouteProber {
            timeout: Duration::from_secs(u64::from(gateway.config().fetch_timeout_s.max(1))),
        };
        loop {
            std::thread::sleep(interval);
            for rec in gateway.registry.list_nodes() {
                match gateway
                    .registry
                    .measure_route(&rec.node_id, &prober, clock.now())
                {
                    Ok(rtt) => log::debug!("route {}: {rtt} ms", rec.node_id),
                    Err(e) => log::debug!("route probe: {e}"),
                }
            }
        }
    });
}

fn handle_connection(
    gateway: Arc<Gateway>,
    clock: Arc<WallClock>,
    mut stream: TcpStream,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }

    if line.trim_start().starts_with('{') {
        // Telemetry feed: JSON objects, one per line, until EOF.
        loop {
            apply_telemetry_line(&gateway, &clock, &line);
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Ok(());
            }
        }
    }

    match ClientRequest::parse(&line) {
        Ok(ClientRequest::Stats) => {
            let snapshot = gateway.snapshot_metrics();
            let json = serde_json::to_string(&snapshot).unwrap_or_else(|_| "{}".into());
            writeln!(stream, "{json}")?;
        }
        Ok(ClientRequest::Play { video, profile }) => {
            handle_play(&gateway, &clock, &mut stream, video, &profile)?;
        }
        Err(e) => {
            log::debug!("bad request: {e}");
            writeln!(stream, "400 BAD_REQUEST")?;
        }
    }
    Ok(())
}

fn apply_telemetry_line(gateway: &Gateway, clock: &WallClock, line: &str) {
    match serde_json::from_str::<TelemetryMsg>(line) {
        Ok(mut msg) => {
            // Live nodes report wall time of their own; stamp with the
            // gateway clock so freshness uses one time base.
            msg.ts = clock.now().0;
            if let Err(e) = gateway.registry.apply_telemetry(&msg) {
                log::warn!("telemetry: {e}");
            }
        }
        Err(e) => log::warn!("telemetry: bad line: {e}"),
    }
}

fn handle_play(
    gateway: &Arc<Gateway>,
    clock: &Arc<WallClock>,
    stream: &mut TcpStream,
    video: VideoId,
    profile: &crate::ids::ProfileId,
) -> std::io::Result<()> {
    let mut session = match gateway.begin_session(video, profile, clock.now()) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("rejecting request: {e}");
            writeln!(stream, "{}", protocol::STATUS_FORMAT_UNSUPPORTED)?;
            return Ok(());
        }
    };
    let mut starter = ThreadFetchStarter::new(gateway.clone(), clock.clone());
    let mut trace = LogTrace;

    loop {
        match gateway.poll_session(&mut session, clock.now(), &mut starter, &mut trace) {
            SessionPoll::Pending => clock.sleep_one_tick(),
            SessionPoll::Terminal(status) => {
                writeln!(stream, "{}", status.status_line())?;
                return Ok(());
            }
            SessionPoll::StartStream(setup) => {
                stream.write_all(
                    protocol::stream_header_line(
                        &setup.video,
                        &setup.variant,
                        setup.total_bytes,
                        setup.segment_size,
                    )
                    .as_bytes(),
                )?;
                let mut machine = StreamMachine::new(setup.plan, clock.now());
                let mut error = None;
                loop {
                    let mut sink = FramedTcpSink {
                        out: stream,
                        total_bytes: setup.total_bytes,
                        segment_size: setup.segment_size,
                    };
                    match machine.on_tick(clock.now(), &setup.source, &mut sink) {
                        StreamStatus::Finished => break,
                        StreamStatus::Failed(e) => {
                            error = Some(e);
                            break;
                        }
                        _ => clock.sleep_one_tick(),
                    }
                }
                let progress = machine.progress().clone();
                gateway.finish_session(
                    &mut session,
                    &progress,
                    error.as_ref(),
                    clock.now(),
                    &mut trace,
                );
                if let Some(dir) = &gateway.config().cache_dir {
                    if let Err(e) = gateway.cache.save_manifest(dir) {
                        log::warn!("manifest save failed: {e}");
                    }
                }
                return Ok(());
            }
        }
    }
}

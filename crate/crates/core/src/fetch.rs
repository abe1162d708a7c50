//! Origin retrieval: byte-range fetches that fill cache entries segment by
//! segment, with per-video request coalescing.
//!
//! One transfer pulls one segment per range request, sequentially, writing
//! each response into the cache before the next request is issued so
//! readers can stream while the fill is in flight. At most one fetch job
//! runs per video; concurrent misses join the running job instead of
//! starting a second origin transfer. A restarted job only requests the
//! segments a previous attempt did not store.
//!
//! `run_fetch_job` is the whole policy: select the best candidate node,
//! probe the size, stage the first segment to learn the rendition's format,
//! admit the entry against the cache budget (falling back to a private
//! unbounded store when admission is denied), then fill. On a node failure
//! it reselects once among the remaining candidates before giving up.

use crate::cache::{CacheError, CacheKey, CacheStore, FillState};
use crate::clock::Clock;
use crate::ids::{NodeId, VideoId};
use crate::media::{self, MediaError};
use crate::registry::{select_best_node, NodeRecord};
use rand::RngCore;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("node {0} timed out")]
    NodeTimeout(NodeId),
    #[error("node {node} rejected range {start}-{end}")]
    RangeRejected { node: NodeId, start: u64, end: u64 },
    #[error("short read from {node}: expected {expected} bytes, got {got}")]
    ShortRead { node: NodeId, expected: u64, got: u64 },
    #[error("video not found at node {0}")]
    NotFoundAtNode(NodeId),
    #[error("node {node} transport error: {msg}")]
    Transport { node: NodeId, msg: String },
    #[error("node {node} served a corrupt container: {msg}")]
    CorruptOrigin { node: NodeId, msg: String },
    #[error("no candidate nodes")]
    NoCandidates,
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl From<MediaError> for FetchError {
    fn from(e: MediaError) -> Self {
        FetchError::CorruptOrigin {
            node: NodeId::new("?"),
            msg: e.to_string(),
        }
    }
}

fn is_node_fault(e: &FetchError) -> bool {
    matches!(
        e,
        FetchError::NodeTimeout(_)
            | FetchError::RangeRejected { .. }
            | FetchError::ShortRead { .. }
            | FetchError::NotFoundAtNode(_)
            | FetchError::Transport { .. }
            | FetchError::CorruptOrigin { .. }
    )
}

/// Inclusive byte range of one segment.
pub fn segment_bounds(total_bytes: u64, segment_size: u32, index: u32) -> (u64, u64) {
    let start = u64::from(index) * u64::from(segment_size);
    let end = (start + u64::from(segment_size)).min(total_bytes) - 1;
    (start, end)
}

/// A transfer source: one connection-equivalent to one origin node.
pub trait OriginTransport {
    fn node_id(&self) -> &NodeId;
    fn size(&mut self, video: &VideoId) -> Result<u64, FetchError>;
    fn fetch_range(&mut self, video: &VideoId, start: u64, end: u64)
        -> Result<Vec<u8>, FetchError>;
}

pub type TransportFactory<'a> =
    dyn Fn(&NodeRecord) -> Result<Box<dyn OriginTransport + 'a>, FetchError> + 'a;

/// Hooks for accounting and event logging along the fetch path. All methods
/// default to no-ops.
pub trait FetchObserver: Send {
    fn on_attempt(&mut self, _node: &NodeId) {}
    fn on_size(&mut self, _node: &NodeId, _video: &VideoId, _total: u64) {}
    fn on_range_request(&mut self, _node: &NodeId, _video: &VideoId, _start: u64, _end: u64) {}
    fn on_range_response(&mut self, _node: &NodeId, _video: &VideoId, _len: u64) {}
    fn on_segment(&mut self, _key: &CacheKey, _index: u32, _len: u64, _completed: bool) {}
    fn on_evictions(&mut self, _keys: &[CacheKey]) {}
    fn on_budget_fallback(&mut self, _video: &VideoId) {}
}

pub struct NoopObserver;
impl FetchObserver for NoopObserver {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobStatus {
    Running,
    Done,
    Failed(String),
}

/// Where a job is writing, published as soon as the entry is admitted so
/// waiters can stream from the fill.
#[derive(Clone)]
pub struct JobDest {
    pub store: CacheStore,
    pub key: CacheKey,
    pub total_bytes: u64,
}

struct JobShared {
    status: JobStatus,
    node: Option<NodeId>,
    dest: Option<JobDest>,
}

/// State of one in-flight (or just-finished) fetch job, shared between the
/// runner and any number of waiting sessions.
pub struct JobState {
    video: VideoId,
    shared: Mutex<JobShared>,
    waiters: AtomicU32,
}

impl JobState {
    fn new(video: VideoId) -> Self {
        JobState {
            video,
            shared: Mutex::new(JobShared {
                status: JobStatus::Running,
                node: None,
                dest: None,
            }),
            waiters: AtomicU32::new(0),
        }
    }

    /// A job outside any table: no coalescing, used by no-cache baselines.
    pub fn detached(video: VideoId) -> Arc<Self> {
        Arc::new(JobState::new(video))
    }

    /// Publishes a terminal status on a detached job.
    pub fn finish_detached(&self, status: JobStatus) {
        debug_assert!(!matches!(status, JobStatus::Running));
        self.set_status(status);
    }

    pub fn video(&self) -> &VideoId {
        &self.video
    }

    pub fn status(&self) -> JobStatus {
        self.shared.lock().unwrap().status.clone()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.shared.lock().unwrap().node.clone()
    }

    pub fn dest(&self) -> Option<JobDest> {
        self.shared.lock().unwrap().dest.clone()
    }

    pub fn waiter_count(&self) -> u32 {
        self.waiters.load(Ordering::SeqCst)
    }

    fn set_node(&self, node: NodeId) {
        self.shared.lock().unwrap().node = Some(node);
    }

    fn set_dest(&self, dest: JobDest) {
        self.shared.lock().unwrap().dest = Some(dest);
    }

    fn set_status(&self, status: JobStatus) {
        self.shared.lock().unwrap().status = status;
    }
}

/// Per-video single-flight table.
#[derive(Default)]
pub struct JobTable {
    jobs: Mutex<HashMap<VideoId, Arc<JobState>>>,
}

pub enum JobTicket {
    /// A job was already running; the caller shares it. The waiter count
    /// has been incremented.
    Joined(Arc<JobState>),
    /// The caller owns the new job and must run it to completion.
    Claimed(Arc<JobState>),
}

impl JobTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Joins the running job for `video` or claims a new one.
    pub fn join_or_claim(&self, video: &VideoId) -> JobTicket {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(job) = jobs.get(video) {
            job.waiters.fetch_add(1, Ordering::SeqCst);
            return JobTicket::Joined(job.clone());
        }
        let job = Arc::new(JobState::new(video.clone()));
        jobs.insert(video.clone(), job.clone());
        JobTicket::Claimed(job)
    }

    /// Publishes the job's terminal status and removes it from the table so
    /// later requests take the cache path (or restart on failure).
    pub fn finish(&self, job: &JobState, status: JobStatus) {
        debug_assert!(!matches!(status, JobStatus::Running));
        job.set_status(status);
        self.jobs.lock().unwrap().remove(&job.video);
    }

    pub fn running_job(&self, video: &VideoId) -> Option<Arc<JobState>> {
        self.jobs.lock().unwrap().get(video).cloned()
    }
}

/// Fills the cache from the given node. Resumes an existing `Filling` entry
/// if one is indexed for the video; otherwise probes the size, stages the
/// first segment to learn the variant key, and admits the entry.
fn fetch_from_node(
    transport: &mut dyn OriginTransport,
    store: &CacheStore,
    video: &VideoId,
    segment_size: u32,
    clock: &dyn Clock,
    job: &JobState,
    observer: &mut dyn FetchObserver,
) -> Result<CacheKey, FetchError> {
    let node = transport.node_id().clone();
    let resume = store
        .entries_for(video)
        .into_iter()
        .find(|r| r.state == FillState::Filling);

    let (key, mut fill) = match resume {
        Some(row) => {
            let grant = match store.begin_fill(&row.key, row.total_bytes, segment_size, clock.now())
            {
                Ok(grant) => grant,
                // Someone else finished this entry since we looked: done.
                Err(CacheError::AlreadyComplete) => {
                    job.set_dest(JobDest {
                        store: store.clone(),
                        key: row.key.clone(),
                        total_bytes: row.total_bytes,
                    });
                    return Ok(row.key);
                }
                Err(e) => return Err(e.into()),
            };
            observer.on_evictions(&grant.evicted);
            job.set_dest(JobDest {
                store: store.clone(),
                key: row.key.clone(),
                total_bytes: row.total_bytes,
            });
            (row.key, grant.fill)
        }
        None => {
            let total = transport.size(video)?;
            observer.on_size(&node, video, total);
            if total < media::CONTAINER_HEADER_LEN as u64 {
                return Err(FetchError::CorruptOrigin {
                    node,
                    msg: format!("{total}-byte object cannot hold a container"),
                });
            }
            let (start, end) = segment_bounds(total, segment_size, 0);
            observer.on_range_request(&node, video, start, end);
            let bytes0 = transport.fetch_range(video, start, end)?;
            observer.on_range_response(&node, video, bytes0.len() as u64);
            if bytes0.len() as u64 != end - start + 1 {
                return Err(FetchError::ShortRead {
                    node,
                    expected: end - start + 1,
                    got: bytes0.len() as u64,
                });
            }
            let info = media::peek_header(&bytes0).map_err(|e| FetchError::CorruptOrigin {
                node: node.clone(),
                msg: e.to_string(),
            })?;
            if info.container_len() != total {
                return Err(FetchError::CorruptOrigin {
                    node,
                    msg: format!(
                        "header declares {} bytes but SIZE reported {total}",
                        info.container_len()
                    ),
                });
            }
            let key = CacheKey::new(video.clone(), info.variant());
            let mut grant = match store.begin_fill(&key, total, segment_size, clock.now()) {
                Ok(grant) => grant,
                Err(CacheError::AlreadyComplete) => {
                    job.set_dest(JobDest {
                        store: store.clone(),
                        key: key.clone(),
                        total_bytes: total,
                    });
                    return Ok(key);
                }
                Err(e) => return Err(e.into()),
            };
            observer.on_evictions(&grant.evicted);
            let completed = grant.fill.write_segment(0, &bytes0)?;
            observer.on_segment(&key, 0, bytes0.len() as u64, completed);
            job.set_dest(JobDest {
                store: store.clone(),
                key: key.clone(),
                total_bytes: total,
            });
            (key, grant.fill)
        }
    };

    while let Some(index) = fill.next_absent_segment() {
        let (start, end) = segment_bounds(fill.total_bytes(), segment_size, index);
        observer.on_range_request(&node, video, start, end);
        let bytes = transport.fetch_range(video, start, end)?;
        observer.on_range_response(&node, video, bytes.len() as u64);
        if bytes.len() as u64 != end - start + 1 {
            return Err(FetchError::ShortRead {
                node,
                expected: end - start + 1,
                got: bytes.len() as u64,
            });
        }
        let completed = fill.write_segment(index, &bytes)?;
        observer.on_segment(&key, index, bytes.len() as u64, completed);
    }
    Ok(key)
}

/// Runs one coalesced fetch job to completion: selects the best candidate,
/// fills the cache, and retries once on the next-best candidate after a
/// node fault. Cache admission failures fall back to a private unbounded
/// store (published through the job) rather than failing the job.
#[allow(clippy::too_many_arguments)]
pub fn run_fetch_job(
    job: &JobState,
    mut candidates: Vec<NodeRecord>,
    connect: &TransportFactory<'_>,
    store: &CacheStore,
    segment_size: u32,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
    observer: &mut dyn FetchObserver,
) -> Result<CacheKey, FetchError> {
    const MAX_ATTEMPTS: usize = 2;
    let video = job.video().clone();
    let mut store = store.clone();
    let mut last_err = FetchError::NoCandidates;

    for _attempt in 0..MAX_ATTEMPTS {
        if candidates.is_empty() {
            return Err(last_err);
        }
        let picked = select_best_node(&candidates, rng);
        candidates.retain(|c| c.node_id != picked.node_id);
        job.set_node(picked.node_id.clone());
        observer.on_attempt(&picked.node_id);

        let mut transport = match connect(&picked) {
            Ok(t) => t,
            Err(e) => {
                last_err = e;
                continue;
            }
        };

        match fetch_from_node(
            transport.as_mut(),
            &store,
            &video,
            segment_size,
            clock,
            job,
            observer,
        ) {
            Ok(key) => return Ok(key),
            Err(FetchError::Cache(CacheError::InsufficientBudget { .. })) => {
                // The rendition does not fit the shared budget even after
                // eviction; serve this request from a private store.
                observer.on_budget_fallback(&video);
                store = CacheStore::new(None);
                match fetch_from_node(
                    transport.as_mut(),
                    &store,
                    &video,
                    segment_size,
                    clock,
                    job,
                    observer,
                ) {
                    Ok(key) => return Ok(key),
                    Err(e) if is_node_fault(&e) => last_err = e,
                    Err(e) => return Err(e),
                }
            }
            Err(e) if is_node_fault(&e) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    Err(last_err)
}

/// Origin transport over TCP using the line-oriented origin protocol. One
/// connection per transport, established lazily and re-established after
/// errors.
pub struct TcpOriginTransport {
    node: NodeId,
    address: String,
    timeout: Duration,
    conn: Option<BufReader<TcpStream>>,
}

impl TcpOriginTransport {
    pub fn new(node: NodeId, address: String, timeout: Duration) -> Self {
        Self {
            node,
            address,
            timeout,
            conn: None,
        }
    }

    fn transport_err(&self, msg: impl Into<String>) -> FetchError {
        FetchError::Transport {
            node: self.node.clone(),
            msg: msg.into(),
        }
    }

    fn map_io(&self, e: std::io::Error) -> FetchError {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
                FetchError::NodeTimeout(self.node.clone())
            }
            _ => self.transport_err(e.to_string()),
        }
    }

    fn request_line(&mut self, line: &str) -> Result<String, FetchError> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.address).map_err(|e| self.map_io(e))?;
            stream
                .set_read_timeout(Some(self.timeout))
                .map_err(|e| self.map_io(e))?;
            self.conn = Some(BufReader::new(stream));
        }
        let conn = self.conn.as_mut().unwrap();
        let res = (|| {
            conn.get_mut().write_all(line.as_bytes())?;
            let mut resp = String::new();
            if conn.read_line(&mut resp)? == 0 {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "connection closed",
                ));
            }
            Ok(resp)
        })();
        match res {
            Ok(r) => Ok(r.trim_end().to_owned()),
            Err(e) => {
                self.conn = None;
                Err(self.map_io(e))
            }
        }
    }

    fn read_exact(&mut self, len: usize) -> Result<Vec<u8>, FetchError> {
        let conn = self.conn.as_mut().expect("connection open after response");
        let mut buf = vec![0u8; len];
        match conn.read_exact(&mut buf) {
            Ok(()) => Ok(buf),
            Err(e) => {
                self.conn = None;
                Err(self.map_io(e))
            }
        }
    }
}

impl OriginTransport for TcpOriginTransport {
    fn node_id(&self) -> &NodeId {
        &self.node
    }

    fn size(&mut self, video: &VideoId) -> Result<u64, FetchError> {
        let resp = self.request_line(&format!("SIZE {video}\n"))?;
        match resp.split_once(' ') {
            Some(("200", n)) => n
                .parse()
                .map_err(|_| self.transport_err(format!("bad SIZE response `{resp}`"))),
            _ if resp.starts_with("404") => Err(FetchError::NotFoundAtNode(self.node.clone())),
            _ => Err(self.transport_err(format!("bad SIZE response `{resp}`"))),
        }
    }

    fn fetch_range(
        &mut self,
        video: &VideoId,
        start: u64,
        end: u64,
    ) -> Result<Vec<u8>, FetchError> {
        let resp = self.request_line(&format!("GET {video} RANGE {start}-{end}\n"))?;
        match resp.split_once(' ') {
            Some(("206", n)) => {
                let len: usize = n
                    .parse()
                    .map_err(|_| self.transport_err(format!("bad 206 length `{resp}`")))?;
                if len as u64 > end - start + 1 {
                    return Err(self.transport_err(format!(
                        "206 length {len} exceeds requested range {start}-{end}"
                    )));
                }
                self.read_exact(len)
            }
            _ if resp.starts_with("404") => Err(FetchError::NotFoundAtNode(self.node.clone())),
            _ if resp.starts_with("416") => Err(FetchError::RangeRejected {
                node: self.node.clone(),
                start,
                end,
            }),
            _ => Err(self.transport_err(format!("bad range response `{resp}`"))),
        }
    }
}

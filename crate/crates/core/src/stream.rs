//! Segment-paced delivery to clients.
//!
//! A stream waits until `prefetch_threshold` segments are buffered, then
//! delivers container bytes in order at a paced rate (at least the playback
//! bitrate when the client link allows). If the pacer is ready to send but
//! the next segment has not arrived from the origin yet, a stall is
//! recorded until delivery resumes; stalls are measured, never hidden.
//!
//! The machine is polled once per tick. The simulator polls it on the
//! virtual clock; the live server polls it on the wall clock between
//! socket writes. Pacing credit is tracked in bit-milliseconds so the
//! arithmetic is exact for any integer rate and tick length.

use crate::cache::{segment_len, CacheError, EntryHandle, FillState};
use crate::clock::Tick;
use crate::fetch::{JobState, JobStatus};
use crate::media::ContainerInfo;
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("client link {available_bps} b/s is below playback bitrate {required_bps} b/s")]
    BandwidthBelowPlayback {
        required_bps: u64,
        available_bps: u64,
    },
    #[error("stream source failed: {0}")]
    SourceFailed(String),
    #[error("client disconnected")]
    ClientDisconnected,
}

#[derive(Clone, Copy, Debug)]
pub struct StreamConfig {
    pub prefetch_seconds: u32,
    pub tick_ms: u32,
    /// Disables pacing: deliver whatever is available each tick.
    pub burst: bool,
    pub pace_cap_kbps: Option<u64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            prefetch_seconds: 2,
            tick_ms: 10,
            burst: false,
            pace_cap_kbps: None,
        }
    }
}

/// Delivery schedule for one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamPlan {
    pub total_bytes: u64,
    pub segment_size: u32,
    pub total_segments: u32,
    /// Segments that must be buffered before the first client byte.
    pub prefetch_threshold: u32,
    pub playback_bitrate_bps: u64,
    /// None means burst (no pacing).
    pub pace_bps: Option<u64>,
    /// Set when the client link cannot sustain the playback bitrate and the
    /// stream was planned anyway; stalls are expected and recorded.
    pub bandwidth_constrained: bool,
    pub tick_ms: u32,
}

fn threshold_segments(
    info: &ContainerInfo,
    total_bytes: u64,
    segment_size: u32,
    cfg: &StreamConfig,
) -> u32 {
    let total_segments = crate::cache::segment_count(total_bytes, segment_size);
    if total_segments == 0 {
        return 0;
    }
    let bitrate = info.playback_bitrate_bps();
    let prefetch_bits = u128::from(cfg.prefetch_seconds) * u128::from(bitrate);
    let denom = 8u128 * u128::from(segment_size);
    let wanted = prefetch_bits.div_ceil(denom).max(1) as u32;
    wanted.min(total_segments)
}

fn build_plan(
    info: &ContainerInfo,
    total_bytes: u64,
    segment_size: u32,
    pace_bps: Option<u64>,
    constrained: bool,
    cfg: &StreamConfig,
) -> StreamPlan {
    StreamPlan {
        total_bytes,
        segment_size,
        total_segments: crate::cache::segment_count(total_bytes, segment_size),
        prefetch_threshold: threshold_segments(info, total_bytes, segment_size, cfg),
        playback_bitrate_bps: info.playback_bitrate_bps(),
        pace_bps,
        bandwidth_constrained: constrained,
        tick_ms: cfg.tick_ms.max(1),
    }
}

/// Plans delivery of one rendition. The pace is `min(device, cap)` raised
/// to the playback bitrate when the device link allows; a device link below
/// the playback bitrate is an error the caller may resolve by transcoding
/// to a cheaper rendition first.
pub fn plan_stream(
    info: &ContainerInfo,
    total_bytes: u64,
    segment_size: u32,
    device_kbps: u64,
    cfg: &StreamConfig,
) -> Result<StreamPlan, StreamError> {
    let device_bps = device_kbps.saturating_mul(1000);
    let playback = info.playback_bitrate_bps();
    if device_bps < playback {
        return Err(StreamError::BandwidthBelowPlayback {
            required_bps: playback,
            available_bps: device_bps,
        });
    }
    let pace = if cfg.burst {
        None
    } else {
        let base = cfg
            .pace_cap_kbps
            .map(|c| c.saturating_mul(1000))
            .unwrap_or(device_bps)
            .min(device_bps);
        Some(base.max(playback))
    };
    Ok(build_plan(info, total_bytes, segment_size, pace, false, cfg))
}

/// Plans delivery on a link that cannot sustain the playback bitrate:
/// paces at the device rate and marks the plan constrained.
pub fn plan_stream_degraded(
    info: &ContainerInfo,
    total_bytes: u64,
    segment_size: u32,
    device_kbps: u64,
    cfg: &StreamConfig,
) -> StreamPlan {
    let pace = if cfg.burst {
        None
    } else {
        Some(device_kbps.saturating_mul(1000))
    };
    build_plan(info, total_bytes, segment_size, pace, true, cfg)
}

/// Readable side of a stream: contiguous bytes available from offset zero,
/// plus the failure state of the fill feeding it, if any.
pub trait StreamSource {
    fn contiguous_bytes(&self) -> u64;
    fn read_range(&self, offset: u64, len: usize) -> Result<Vec<u8>, CacheError>;
    fn failed(&self) -> Option<String>;
}

/// Streams from a cache entry, optionally watching the fetch job that is
/// still filling it.
pub struct CacheSource {
    pub entry: EntryHandle,
    pub job: Option<Arc<JobState>>,
}

impl StreamSource for CacheSource {
    fn contiguous_bytes(&self) -> u64 {
        self.entry.contiguous_bytes()
    }

    fn read_range(&self, offset: u64, len: usize) -> Result<Vec<u8>, CacheError> {
        self.entry.read_range(offset, len)
    }

    fn failed(&self) -> Option<String> {
        if self.entry.state() == FillState::Complete {
            return None;
        }
        match self.job.as_ref().map(|j| j.status()) {
            Some(JobStatus::Running) => None,
            Some(JobStatus::Failed(reason)) => Some(reason),
            // The job ended but not in this entry (e.g. it fell back to a
            // private store mid-fill); waiting here would hang forever.
            Some(JobStatus::Done) => Some("fill finished in another store".into()),
            None => Some("fill abandoned".into()),
        }
    }
}

/// Receives delivered bytes. `offset_in_segment == 0` marks the first bytes
/// of a new segment (where framed transports emit a length prefix).
pub trait DeliverySink {
    fn deliver(
        &mut self,
        segment_index: u32,
        offset_in_segment: u32,
        bytes: &[u8],
    ) -> Result<(), StreamError>;

    fn finish(&mut self) -> Result<(), StreamError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StallEvent {
    pub at: Tick,
    pub ticks: u64,
}

#[derive(Clone, Debug)]
pub struct StreamProgress {
    pub started_at: Tick,
    pub first_byte_at: Option<Tick>,
    pub segments_sent: u32,
    pub bytes_sent: u64,
    pub stall_events: Vec<StallEvent>,
}

impl StreamProgress {
    pub fn total_stall_ticks(&self) -> u64 {
        self.stall_events.iter().map(|s| s.ticks).sum()
    }

    /// Ticks from stream start to first delivered byte.
    pub fn startup_delay(&self) -> Option<u64> {
        self.first_byte_at.map(|t| t.saturating_sub(self.started_at))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StreamStatus {
    WaitingPrefetch,
    Streaming,
    Stalled,
    Finished,
    Failed(StreamError),
}

pub struct StreamMachine {
    plan: StreamPlan,
    started: bool,
    done: bool,
    sent_bytes: u64,
    credit_bit_ms: u128,
    last_credit_tick: Option<Tick>,
    stall_open_at: Option<Tick>,
    progress: StreamProgress,
}

impl StreamMachine {
    pub fn new(plan: StreamPlan, started_at: Tick) -> Self {
        StreamMachine {
            plan,
            started: false,
            done: false,
            sent_bytes: 0,
            credit_bit_ms: 0,
            last_credit_tick: None,
            stall_open_at: None,
            progress: StreamProgress {
                started_at,
                first_byte_at: None,
                segments_sent: 0,
                bytes_sent: 0,
                stall_events: Vec::new(),
            },
        }
    }

    pub fn plan(&self) -> &StreamPlan {
        &self.plan
    }

    pub fn progress(&self) -> &StreamProgress {
        &self.progress
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Tick at which the currently open stall began, if one is open.
    pub fn stall_open_since(&self) -> Option<Tick> {
        self.stall_open_at
    }

    fn close_stall(&mut self, now: Tick) {
        if let Some(open) = self.stall_open_at.take() {
            self.progress.stall_events.push(StallEvent {
                at: open,
                ticks: now.saturating_sub(open).max(1),
            });
        }
    }

    fn fail(&mut self, now: Tick, err: StreamError) -> StreamStatus {
        self.close_stall(now);
        self.done = true;
        StreamStatus::Failed(err)
    }

    /// Advances the stream for the tick `now`. Safe to call repeatedly with
    /// the same tick (no extra pacing credit accrues) and with gaps (credit
    /// catches up).
    pub fn on_tick(
        &mut self,
        now: Tick,
        source: &dyn StreamSource,
        sink: &mut dyn DeliverySink,
    ) -> StreamStatus {
        if self.done {
            return StreamStatus::Finished;
        }
        if let Some(reason) = source.failed() {
            return self.fail(now, StreamError::SourceFailed(reason));
        }

        let avail = source.contiguous_bytes().min(self.plan.total_bytes);
        if !self.started {
            let avail_segments = if avail == self.plan.total_bytes {
                self.plan.total_segments
            } else {
                (avail / u64::from(self.plan.segment_size)) as u32
            };
            if avail_segments < self.plan.prefetch_threshold {
                return StreamStatus::WaitingPrefetch;
            }
            self.started = true;
            self.last_credit_tick = None;
        }

        let budget = match self.plan.pace_bps {
            None => self.plan.total_bytes - self.sent_bytes,
            Some(pace) => {
                let elapsed = match self.last_credit_tick {
                    None => 1,
                    Some(last) => now.saturating_sub(last),
                };
                self.credit_bit_ms += u128::from(pace)
                    * u128::from(self.plan.tick_ms)
                    * u128::from(elapsed);
                ((self.credit_bit_ms / 8000) as u64).min(self.plan.total_bytes - self.sent_bytes)
            }
        };
        self.last_credit_tick = Some(now);

        let deliverable = avail.saturating_sub(self.sent_bytes);
        let mut n = budget.min(deliverable);

        if n == 0 {
            if self.sent_bytes == self.plan.total_bytes {
                self.close_stall(now);
                self.done = true;
                if let Err(e) = sink.finish() {
                    return StreamStatus::Failed(e);
                }
                return StreamStatus::Finished;
            }
            if budget > 0 && deliverable == 0 {
                // Pacer is ready but the next segment has not arrived.
                if self.stall_open_at.is_none() {
                    self.stall_open_at = Some(now);
                }
                return StreamStatus::Stalled;
            }
            return StreamStatus::Streaming;
        }

        self.close_stall(now);
        if self.progress.first_byte_at.is_none() {
            self.progress.first_byte_at = Some(now);
        }
        if self.plan.pace_bps.is_some() {
            self.credit_bit_ms -= u128::from(n) * 8000;
        }
        while n > 0 {
            let seg = (self.sent_bytes / u64::from(self.plan.segment_size)) as u32;
            let off = (self.sent_bytes % u64::from(self.plan.segment_size)) as u32;
            let seg_total = segment_len(self.plan.total_bytes, self.plan.segment_size, seg);
            let chunk = n.min(u64::from(seg_total - off)) as usize;
            let bytes = match source.read_range(self.sent_bytes, chunk) {
                Ok(b) => b,
                Err(e) => {
                    return self.fail(now, StreamError::SourceFailed(e.to_string()));
                }
            };
            if let Err(e) = sink.deliver(seg, off, &bytes) {
                return self.fail(now, e);
            }
            self.sent_bytes += chunk as u64;
            self.progress.bytes_sent = self.sent_bytes;
            n -= chunk as u64;
        }
        self.progress.segments_sent = if self.sent_bytes == self.plan.total_bytes {
            self.plan.total_segments
        } else {
            (self.sent_bytes / u64::from(self.plan.segment_size)) as u32
        };

        if self.sent_bytes == self.plan.total_bytes {
            self.done = true;
            if let Err(e) = sink.finish() {
                return StreamStatus::Failed(e);
            }
            return StreamStatus::Finished;
        }
        StreamStatus::Streaming
    }
}

/// Collects delivered bytes; test helper and in-memory client.
#[derive(Default)]
pub struct CollectSink {
    pub bytes: Vec<u8>,
    pub finished: bool,
}

impl DeliverySink for CollectSink {
    fn deliver(&mut self, _seg: u32, _off: u32, bytes: &[u8]) -> Result<(), StreamError> {
        self.bytes.extend_from_slice(bytes);
        Ok(())
    }

    fn finish(&mut self) -> Result<(), StreamError> {
        self.finished = true;
        Ok(())
    }
}

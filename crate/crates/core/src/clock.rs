//! Virtual time. Everything in the gateway is timestamped in ticks; the
//! simulator advances ticks by hand, the live server derives them from the
//! wall clock. Using one unit everywhere keeps cache stamps, telemetry
//! freshness and pacing arithmetic identical in both modes.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Sub};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// One instant of virtual time, in ticks since the epoch of the run.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub const ZERO: Tick = Tick(0);

    pub fn saturating_sub(self, other: Tick) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for Tick {
    type Output = Tick;
    fn add(self, rhs: u64) -> Tick {
        Tick(self.0 + rhs)
    }
}

impl AddAssign<u64> for Tick {
    fn add_assign(&mut self, rhs: u64) {
        self.0 += rhs;
    }
}

impl Sub<Tick> for Tick {
    type Output = u64;
    fn sub(self, rhs: Tick) -> u64 {
        self.0 - rhs.0
    }
}

impl std::fmt::Display for Tick {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Tick;
}

/// Manually advanced clock for the simulator and for tests.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Tick) -> Self {
        Self(AtomicU64::new(start.0))
    }

    pub fn advance(&self, ticks: u64) {
        self.0.fetch_add(ticks, Ordering::SeqCst);
    }

    pub fn set(&self, t: Tick) {
        self.0.store(t.0, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Tick {
        Tick(self.0.load(Ordering::SeqCst))
    }
}

/// Wall clock quantized to the configured tick duration.
pub struct WallClock {
    start: Instant,
    tick_ms: u64,
}

impl WallClock {
    pub fn new(tick_ms: u64) -> Self {
        Self {
            start: Instant::now(),
            tick_ms: tick_ms.max(1),
        }
    }

    pub fn tick_ms(&self) -> u64 {
        self.tick_ms
    }

    /// Sleeps until the next tick boundary.
    pub fn sleep_one_tick(&self) {
        std::thread::sleep(std::time::Duration::from_millis(self.tick_ms));
    }
}

impl Clock for WallClock {
    fn now(&self) -> Tick {
        Tick(self.start.elapsed().as_millis() as u64 / self.tick_ms)
    }
}

/// Converts a duration in milliseconds to ticks, rounding up so sub-tick
/// latencies still cost time.
pub fn ms_to_ticks(ms: u64, tick_ms: u64) -> u64 {
    let tick_ms = tick_ms.max(1);
    ms.div_ceil(tick_ms)
}

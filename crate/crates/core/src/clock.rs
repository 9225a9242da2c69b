//! Millisecond clocks shared by the engine, the registry and the simulator.
//!
//! Simulated scenarios run on a [`ScaledClock`], which advances `factor`
//! simulated milliseconds per real millisecond. Every period, deadline and
//! window is expressed in simulated time, so all ratios survive compression.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Current time in milliseconds.
    fn now_ms(&self) -> u64;

    /// Converts a duration in clock milliseconds to real time.
    fn real(&self, ms: u64) -> Duration {
        Duration::from_millis(ms)
    }

    fn sleep(&self, ms: u64) {
        std::thread::sleep(self.real(ms));
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(1)
    }
}

/// A clock that only moves when told to. Sleeping on it advances it.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_ms)),
        }
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn real(&self, _ms: u64) -> Duration {
        Duration::ZERO
    }

    fn sleep(&self, ms: u64) {
        self.advance(ms);
    }
}

/// Real time sped up by `factor`, starting at `origin_ms`.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    started: Instant,
    origin_ms: u64,
    factor: f64,
}

impl ScaledClock {
    pub fn new(origin_ms: u64, factor: f64) -> Self {
        assert!(factor > 0.0, "time scale factor must be positive");
        Self {
            started: Instant::now(),
            origin_ms,
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn origin_ms(&self) -> u64 {
        self.origin_ms
    }
}

impl Clock for ScaledClock {
    fn now_ms(&self) -> u64 {
        let elapsed = self.started.elapsed().as_secs_f64() * 1000.0 * self.factor;
        self.origin_ms + elapsed as u64
    }

    fn real(&self, ms: u64) -> Duration {
        Duration::from_secs_f64(ms as f64 / 1000.0 / self.factor)
    }
}

//! Time sources. Deterministic runs use [`LogicalClock`].

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Advances one second per call from a fixed epoch.
#[derive(Debug)]
pub struct LogicalClock {
    epoch: i64,
    tick: AtomicI64,
}

impl LogicalClock {
    /// Starts at 2024-01-01T00:00:00Z.
    pub fn new() -> Self {
        Self::starting_at(1_704_067_200)
    }

    pub fn starting_at(epoch_secs: i64) -> Self {
        Self { epoch: epoch_secs, tick: AtomicI64::new(0) }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.tick.fetch_add(1, Ordering::SeqCst);
        Utc.timestamp_opt(self.epoch + t, 0).single().unwrap_or_default()
    }
}

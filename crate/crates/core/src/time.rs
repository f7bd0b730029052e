//! Simulated time.
//!
//! Every component takes its notion of "now" from a [`Clock`]. The simulation
//! drives a [`VirtualClock`]; nothing in this crate reads the wall clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};

/// A UTC instant on the simulated timeline.
pub type Timestamp = DateTime<Utc>;

/// Default origin of the simulated timeline.
pub fn sim_epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2023, 3, 1, 0, 0, 0).unwrap()
}

pub trait Clock {
    fn now(&self) -> Timestamp;
}

/// A settable clock shared by all simulated components.
///
/// Cloning yields a handle onto the same instant.
#[derive(Clone, Debug)]
pub struct VirtualClock {
    micros: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            micros: Arc::new(AtomicI64::new(start.timestamp_micros())),
        }
    }

    /// Moves the clock to `t`. The clock never runs backwards; earlier
    /// instants are ignored.
    pub fn advance_to(&self, t: Timestamp) {
        self.micros.fetch_max(t.timestamp_micros(), Ordering::SeqCst);
    }

    pub fn advance_by(&self, d: Duration) {
        let t = self.now() + d;
        self.advance_to(t);
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new(sim_epoch())
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Utc.timestamp_micros(self.micros.load(Ordering::SeqCst))
            .single()
            .expect("clock holds a valid instant")
    }
}

/// A clock frozen at a single instant.
#[derive(Clone, Copy, Debug)]
pub struct FixedClock(pub Timestamp);

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        self.0
    }
}

/// Converts fractional seconds into a chrono duration at microsecond precision.
pub fn seconds(s: f64) -> Duration {
    Duration::microseconds((s * 1e6).round() as i64)
}

pub fn as_seconds(d: Duration) -> f64 {
    d.num_microseconds().unwrap_or(i64::MAX) as f64 / 1e6
}

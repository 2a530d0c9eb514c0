//! Monotonic wall-clock source shared by every component of a gateway
//! process.
//!
//! [`gateway_core`] takes explicit `now_ms` arguments everywhere so that
//! tests can drive time by hand. In the running process all of those
//! arguments must come from one anchor, or session timings and cache TTLs
//! would disagree with each other.

use std::time::Instant;

/// Milliseconds elapsed since a fixed process-local origin.
///
/// Cloning is cheap and every clone shares the same origin, so readings
/// from different tasks are directly comparable.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    /// Fractional milliseconds since the origin, for session timings.
    pub fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    /// Whole milliseconds since the origin, for cache TTL arithmetic.
    pub fn now_ms_u64(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

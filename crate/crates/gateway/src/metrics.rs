//! Process metrics.
//!
//! Counters obey one conservation rule: every request that enters the
//! gateway is classified exactly once, so at quiescence
//! `requests_total = pass_through + refused + fail_closed + fail_open +
//! protocol_errors`. Resolved sessions are classified by their gate
//! decision (the driver records those); requests that never resolve
//! (malformed bodies, validation failures, target failures before
//! release) are protocol errors, recorded by whichever entry point
//! rejected them.
//!
//! Added-delay percentiles come from a fixed-size uniform reservoir, so
//! memory stays bounded no matter how long the process runs; the maximum
//! is tracked exactly.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use gateway_core::cache::CacheStats;
use gateway_core::eval::percentile;
use gateway_core::GateDecision;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

/// Sample budget for the added-delay reservoir.
const RESERVOIR_CAPACITY: usize = 1024;

struct Reservoir {
    samples: Vec<f64>,
    seen: u64,
    max: f64,
    rng: StdRng,
}

impl Reservoir {
    fn new() -> Self {
        Self {
            samples: Vec::with_capacity(RESERVOIR_CAPACITY),
            seen: 0,
            max: 0.0,
            rng: StdRng::from_os_rng(),
        }
    }

    fn push(&mut self, value: f64) {
        self.seen += 1;
        self.max = self.max.max(value);
        if self.samples.len() < RESERVOIR_CAPACITY {
            self.samples.push(value);
        } else {
            // Uniform replacement keeps every observation equally likely
            // to be in the sample.
            let slot = self.rng.random_range(0..self.seen);
            if (slot as usize) < RESERVOIR_CAPACITY {
                self.samples[slot as usize] = value;
            }
        }
    }

    fn summary(&self) -> DelaySummary {
        let mut sorted = self.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("delays are finite"));
        DelaySummary {
            p50: percentile(&sorted, 50.0).unwrap_or(0.0),
            p95: percentile(&sorted, 95.0).unwrap_or(0.0),
            max: if self.seen == 0 { 0.0 } else { self.max },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelaySummary {
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Snapshot served at `/metrics`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub requests_total: u64,
    pub pass_through: u64,
    pub refused: u64,
    pub fail_closed: u64,
    pub fail_open: u64,
    pub protocol_errors: u64,
    pub cache: CacheStats,
    pub added_delay_ms: DelaySummary,
}

#[derive(Default)]
pub struct Metrics {
    requests_total: AtomicU64,
    pass_through: AtomicU64,
    refused: AtomicU64,
    fail_closed: AtomicU64,
    fail_open: AtomicU64,
    protocol_errors: AtomicU64,
    delays: Mutex<Option<Reservoir>>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count one resolved session under its gate decision.
    pub fn record_outcome(&self, decision: GateDecision, added_delay_ms: f64) {
        self.requests_total.fetch_add(1, Ordering::Relaxed);
        let counter = match decision {
            GateDecision::PassThrough => &self.pass_through,
            GateDecision::Refused => &self.refused,
            GateDecision::FailClosed => &self.fail_closed,
            GateDecision::FailOpen => &self.fail_open,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        let mut guard = self.delays.lock().expect("delay lock");
        guard
            .get_or_insert_with(Reservoir::new)
            .push(added_delay_ms);
    }

    /// Count one request that never resolved to a gate decision.
    pub fn record_protocol_error(&self) {
        self.requests_total.fetch_add(1, Ordering::Relaxed);
        self.protocol_errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self, cache: CacheStats) -> MetricsSnapshot {
        let added_delay_ms = self
            .delays
            .lock()
            .expect("delay lock")
            .as_ref()
            .map(Reservoir::summary)
            .unwrap_or(DelaySummary {
                p50: 0.0,
                p95: 0.0,
                max: 0.0,
            });
        MetricsSnapshot {
            requests_total: self.requests_total.load(Ordering::Relaxed),
            pass_through: self.pass_through.load(Ordering::Relaxed),
            refused: self.refused.load(Ordering::Relaxed),
            fail_closed: self.fail_closed.load(Ordering::Relaxed),
            fail_open: self.fail_open.load(Ordering::Relaxed),
            protocol_errors: self.protocol_errors.load(Ordering::Relaxed),
            cache,
            added_delay_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_cache_stats() -> CacheStats {
        CacheStats {
            hits: 0,
            misses: 0,
            evictions: 0,
            live_entries: 0,
        }
    }

    #[test]
    fn conservation_holds_across_all_classifications() {
        let metrics = Metrics::new();
        metrics.record_outcome(GateDecision::PassThrough, 1.0);
        metrics.record_outcome(GateDecision::PassThrough, 2.0);
        metrics.record_outcome(GateDecision::Refused, 120.0);
        metrics.record_outcome(GateDecision::FailClosed, 500.0);
        metrics.record_outcome(GateDecision::FailOpen, 0.0);
        metrics.record_protocol_error();

        let snap = metrics.snapshot(empty_cache_stats());
        assert_eq!(snap.requests_total, 6);
        assert_eq!(
            snap.requests_total,
            snap.pass_through + snap.refused + snap.fail_closed + snap.fail_open
                + snap.protocol_errors
        );
        assert_eq!(snap.pass_through, 2);
        assert_eq!(snap.refused, 1);
        assert_eq!(snap.fail_closed, 1);
        assert_eq!(snap.fail_open, 1);
        assert_eq!(snap.protocol_errors, 1);
    }

    #[test]
    fn delay_summary_tracks_percentiles_and_exact_max() {
        let metrics = Metrics::new();
        for i in 1..=100 {
            metrics.record_outcome(GateDecision::PassThrough, i as f64);
        }
        let snap = metrics.snapshot(empty_cache_stats());
        assert_eq!(snap.added_delay_ms.p50, 50.0);
        assert_eq!(snap.added_delay_ms.p95, 95.0);
        assert_eq!(snap.added_delay_ms.max, 100.0);
    }

    #[test]
    fn empty_metrics_snapshot_is_all_zero() {
        let metrics = Metrics::new();
        let snap = metrics.snapshot(empty_cache_stats());
        assert_eq!(snap.requests_total, 0);
        assert_eq!(snap.added_delay_ms.p50, 0.0);
        assert_eq!(snap.added_delay_ms.max, 0.0);
    }

    #[test]
    fn reservoir_stays_bounded_and_max_stays_exact() {
        let metrics = Metrics::new();
        for i in 0..5000 {
            metrics.record_outcome(GateDecision::PassThrough, (i % 7) as f64);
        }
        metrics.record_outcome(GateDecision::PassThrough, 999.0);
        let snap = metrics.snapshot(empty_cache_stats());
        assert_eq!(snap.added_delay_ms.max, 999.0);
        assert!(snap.added_delay_ms.p50 <= 6.0 || snap.added_delay_ms.p50 == 999.0);
        let guard = metrics.delays.lock().unwrap();
        assert!(guard.as_ref().unwrap().samples.len() <= RESERVOIR_CAPACITY);
    }

    #[test]
    fn snapshot_serializes_with_expected_keys() {
        let metrics = Metrics::new();
        metrics.record_outcome(GateDecision::PassThrough, 3.0);
        let snap = metrics.snapshot(empty_cache_stats());
        let value = serde_json::to_value(&snap).unwrap();
        let object = value.as_object().unwrap();
        for key in [
            "requests_total",
            "pass_through",
            "refused",
            "fail_closed",
            "fail_open",
            "protocol_errors",
            "cache",
            "added_delay_ms",
        ] {
            assert!(object.contains_key(key), "missing key {key}");
        }
        let delay = object["added_delay_ms"].as_object().unwrap();
        assert!(delay.contains_key("p50"));
        assert!(delay.contains_key("p95"));
        assert!(delay.contains_key("max"));
        let cache = object["cache"].as_object().unwrap();
        for key in ["hits", "misses", "evictions", "live_entries"] {
            assert!(cache.contains_key(key), "missing cache key {key}");
        }
    }
}

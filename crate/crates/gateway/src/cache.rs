//! Process-wide verdict cache: the core LRU+TTL store behind a mutex,
//! fed from the shared [`crate::Clock`].

use std::sync::Mutex;

use gateway_core::cache::{CacheKey, CacheStats, VerdictCache};
use gateway_core::DetectionVerdict;

/// Thread-safe wrapper around [`VerdictCache`].
///
/// The critical sections are tiny (map lookups), so a plain mutex is
/// enough even under the concurrency the gateway sees.
pub struct SharedCache {
    inner: Mutex<VerdictCache>,
}

impl SharedCache {
    pub fn new(capacity: usize, ttl_s: u64) -> Self {
        Self {
            inner: Mutex::new(VerdictCache::new(capacity, ttl_s)),
        }
    }

    pub fn get(&self, key: &CacheKey, now_ms: u64) -> Option<DetectionVerdict> {
        self.inner.lock().expect("cache lock").get(key, now_ms)
    }

    pub fn put(&self, key: CacheKey, verdict: DetectionVerdict, now_ms: u64) {
        self.inner
            .lock()
            .expect("cache lock")
            .put(key, verdict, now_ms);
    }

    pub fn stats(&self, now_ms: u64) -> CacheStats {
        self.inner.lock().expect("cache lock").stats(now_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gateway_core::cache::cache_key;

    #[test]
    fn shared_cache_round_trips() {
        let cache = SharedCache::new(4, 60);
        let key = cache_key("some prompt");
        assert!(cache.get(&key, 0).is_none());
        cache.put(key, DetectionVerdict::benign("No", 1.0), 0);
        let hit = cache.get(&key, 10).expect("hit");
        assert_eq!(hit.raw_checker_output, "No");
        let stats = cache.stats(10);
        assert_eq!(stats.hits, 1);
        assert_eq!(stats.misses, 1);
        assert_eq!(stats.live_entries, 1);
    }
}

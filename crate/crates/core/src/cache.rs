//! Verdict cache keyed by normalized prompt hash.
//!
//! Attackers tend to reuse a working jailbreak verbatim, so remembering
//! verdicts for recently seen prompts skips the checker entirely on a
//! repeat. Entries age out after a TTL so a model or policy change does
//! not serve stale verdicts forever, and a capacity bound with
//! least-recently-used eviction keeps memory flat.
//!
//! Timestamps are supplied by the caller in milliseconds on a monotonic
//! clock, which keeps the structure deterministic under test. Capacities
//! here are modest (hundreds to a few thousand entries), so tree maps
//! are plenty; the recency index makes eviction O(log n) rather than a
//! scan.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use alloc::collections::BTreeMap;
use serde::Serialize;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::model::DetectionVerdict;

/// SHA-256 of the normalized prompt.
pub type CacheKey = [u8; 32];

/// Canonical form used for keying: Unicode NFC, surrounding whitespace
/// removed, internal whitespace runs collapsed to a single space. Case
/// is preserved.
pub fn normalize_prompt(prompt: &str) -> String {
    let composed: String = prompt.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    let mut pending_space = false;
    for c in composed.trim().chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Cache key for a raw (un-normalized) prompt.
pub fn cache_key(prompt: &str) -> CacheKey {
    let digest = Sha256::digest(normalize_prompt(prompt).as_bytes());
    digest.into()
}

/// Lowercase hex rendering of a key, as stored in adversarial example
/// records.
pub fn key_hex(key: &CacheKey) -> String {
    let mut out = String::with_capacity(64);
    for byte in key {
        let _ = fmt::Write::write_fmt(&mut out, format_args!("{byte:02x}"));
    }
    out
}

/// Counter snapshot. `live_entries` counts entries that have not
/// expired at the time of the snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub live_entries: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    verdict: DetectionVerdict,
    inserted_at_ms: u64,
    recency: u64,
}

/// Bounded LRU map from prompt hash to verdict with lazy TTL expiry.
///
/// A capacity of zero disables storage entirely. A TTL of zero makes
/// every entry expire immediately, which also effectively disables the
/// cache; both are valid configurations, not errors.
#[derive(Debug, Clone)]
pub struct VerdictCache {
    capacity: usize,
    ttl_ms: u64,
    tick: u64,
    entries: BTreeMap<CacheKey, Entry>,
    recency_index: BTreeMap<u64, CacheKey>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl VerdictCache {
    pub fn new(capacity: usize, ttl_s: u64) -> Self {
        Self {
            capacity,
            ttl_ms: ttl_s.saturating_mul(1000),
            tick: 0,
            entries: BTreeMap::new(),
            recency_index: BTreeMap::new(),
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    fn expired(&self, entry: &Entry, now_ms: u64) -> bool {
        now_ms.saturating_sub(entry.inserted_at_ms) >= self.ttl_ms
    }

    /// Looks up a verdict. A hit refreshes the entry's recency; an entry
    /// past its TTL is removed and reported as a miss.
    pub fn get(&mut self, key: &CacheKey, now_ms: u64) -> Option<DetectionVerdict> {
        let Some(entry) = self.entries.get(key) else {
            self.misses += 1;
            return None;
        };
        if self.expired(entry, now_ms) {
            let stale = self.entries.remove(key).expect("present above");
            self.recency_index.remove(&stale.recency);
            self.misses += 1;
            return None;
        }
        self.hits += 1;
        let fresh = self.tick;
        self.tick += 1;
        let entry = self.entries.get_mut(key).expect("present above");
        self.recency_index.remove(&entry.recency);
        entry.recency = fresh;
        self.recency_index.insert(fresh, *key);
        Some(entry.verdict.clone())
    }

    /// Inserts or replaces a verdict. At capacity, expired entries are
    /// dropped first; if none are, the least recently used entry is
    /// evicted. Only capacity-driven removals count as evictions.
    pub fn put(&mut self, key: CacheKey, verdict: DetectionVerdict, now_ms: u64) {
        if self.capacity == 0 {
            return;
        }
        let recency = self.tick;
        self.tick += 1;
        if let Some(existing) = self.entries.get_mut(&key) {
            self.recency_index.remove(&existing.recency);
            *existing = Entry {
                verdict,
                inserted_at_ms: now_ms,
                recency,
            };
            self.recency_index.insert(recency, key);
            return;
        }
        if self.entries.len() >= self.capacity {
            self.purge_expired(now_ms);
        }
        if self.entries.len() >= self.capacity {
            if let Some((&oldest, _)) = self.recency_index.iter().next() {
                let victim = self.recency_index.remove(&oldest).expect("present above");
                self.entries.remove(&victim);
                self.evictions += 1;
            }
        }
        self.entries.insert(
            key,
            Entry {
                verdict,
                inserted_at_ms: now_ms,
                recency,
            },
        );
        self.recency_index.insert(recency, key);
    }

    fn purge_expired(&mut self, now_ms: u64) {
        let stale: Vec<CacheKey> = self
            .entries
            .iter()
            .filter(|(_, e)| self.expired(e, now_ms))
            .map(|(k, _)| *k)
            .collect();
        for key in stale {
            if let Some(entry) = self.entries.remove(&key) {
                self.recency_index.remove(&entry.recency);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self, now_ms: u64) -> CacheStats {
        CacheStats {
            hits: self.hits,
            misses: self.misses,
            evictions: self.evictions,
            live_entries: self
                .entries
                .values()
                .filter(|e| !self.expired(e, now_ms))
                .count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VerdictKind;

    fn benign(tag: &str) -> DetectionVerdict {
        DetectionVerdict::benign(tag, 1.0)
    }

    fn harmful(tag: &str) -> DetectionVerdict {
        DetectionVerdict::harmful(tag, tag, 1.0)
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let mut cache = VerdictCache::new(2, 600);
        let (a, b, c) = (cache_key("a"), cache_key("b"), cache_key("c"));
        cache.put(a, benign("a"), 0);
        cache.put(b, benign("b"), 1);
        assert!(cache.get(&a, 2).is_some());
        cache.put(c, benign("c"), 3);

        assert!(cache.get(&b, 4).is_none(), "b was least recently used");
        assert!(cache.get(&a, 5).is_some());
        assert!(cache.get(&c, 6).is_some());
        let stats = cache.stats(7);
        assert_eq!(stats.evictions, 1);
        assert_eq!(stats.live_entries, 2);
    }

    #[test]
    fn ttl_expires_entries_lazily() {
        let mut cache = VerdictCache::new(8, 600);
        let key = cache_key("prompt");
        cache.put(key, harmful("bad part"), 0);
        assert!(cache.get(&key, 599_999).is_some());
        assert!(cache.get(&key, 600_000).is_none());
        assert_eq!(cache.len(), 0, "expired entry is removed on access");
        let stats = cache.stats(600_001);
        assert_eq!((stats.hits, stats.misses, stats.evictions), (1, 1, 0));
    }

    #[test]
    fn expired_entries_make_room_without_counting_as_evictions() {
        let mut cache = VerdictCache::new(2, 1);
        cache.put(cache_key("a"), benign("a"), 0);
        cache.put(cache_key("b"), benign("b"), 0);
        cache.put(cache_key("c"), benign("c"), 5_000);
        assert_eq!(cache.stats(5_000).evictions, 0);
        assert!(cache.get(&cache_key("c"), 5_001).is_some());
    }

    #[test]
    fn put_replaces_existing_entry() {
        let mut cache = VerdictCache::new(2, 600);
        let key = cache_key("p");
        cache.put(key, benign("first"), 0);
        cache.put(key, harmful("second"), 10);
        assert_eq!(cache.len(), 1);
        let got = cache.get(&key, 20).unwrap();
        assert_eq!(got.kind, VerdictKind::Harmful);
        assert_eq!(got.fragment, "second");
    }

    #[test]
    fn zero_capacity_disables_storage() {
        let mut cache = VerdictCache::new(0, 600);
        cache.put(cache_key("p"), benign("x"), 0);
        assert!(cache.get(&cache_key("p"), 1).is_none());
        assert_eq!(cache.stats(1).live_entries, 0);
    }

    #[test]
    fn normalization_collapses_whitespace_and_composes() {
        assert_eq!(normalize_prompt("  how to   make\n\ta bomb  "), "how to make a bomb");
        // Decomposed e + combining acute composes to the same key as
        // precomposed.
        assert_eq!(cache_key("caf\u{0065}\u{0301}"), cache_key("caf\u{00E9}"));
        assert_ne!(cache_key("How to"), cache_key("how to"), "case is preserved");
        assert_eq!(normalize_prompt("   "), "");
    }

    #[test]
    fn key_hex_is_lowercase_sha256() {
        // SHA-256 of the empty string, a fixed reference value.
        assert_eq!(
            key_hex(&cache_key("")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(key_hex(&cache_key("")).len(), 64);
    }

    #[test]
    fn both_verdict_kinds_are_cached() {
        let mut cache = VerdictCache::new(4, 600);
        cache.put(cache_key("good"), benign("ok"), 0);
        cache.put(cache_key("bad"), harmful("part"), 0);
        assert_eq!(cache.get(&cache_key("good"), 1).unwrap().kind, VerdictKind::Benign);
        assert_eq!(cache.get(&cache_key("bad"), 1).unwrap().kind, VerdictKind::Harmful);
    }
}

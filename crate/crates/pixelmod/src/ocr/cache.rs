use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{extract_label, OcrError, OcrLabel, OcrProvider, OcrRequest};
use crate::hashing::{HashKind, PerceptualHash, HASH_WORDS};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

type Key = (HashKind, [u64; HASH_WORDS]);
type Slot = Arc<Mutex<Option<OcrLabel>>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub provider_calls: u64,
    pub entries: u64,
}

/// Labels keyed by perceptual hash.
///
/// Concurrent lookups of the same missing hash are coalesced: one caller
/// runs the provider while the others wait for its result. Provider calls
/// across all keys are capped at `max_in_flight`. Failed extractions are
/// not cached.
pub struct LabelCache {
    slots: Mutex<HashMap<Key, Slot>>,
    permits: Mutex<usize>,
    permit_freed: Condvar,
    max_in_flight: usize,
    hits: AtomicU64,
    misses: AtomicU64,
    provider_calls: AtomicU64,
}

impl Default for LabelCache {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_IN_FLIGHT)
    }
}

impl LabelCache {
    pub fn new(max_in_flight: usize) -> Self {
        let max_in_flight = max_in_flight.max(1);
        LabelCache {
            slots: Mutex::new(HashMap::new()),
            permits: Mutex::new(max_in_flight),
            permit_freed: Condvar::new(),
            max_in_flight,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            provider_calls: AtomicU64::new(0),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Returns the cached label for `hash`, or extracts and caches it.
    /// The flag is `true` when no provider call was made.
    pub fn get_or_extract(
        &self,
        hash: &PerceptualHash,
        request: &OcrRequest<'_>,
        provider: &dyn OcrProvider,
    ) -> Result<(OcrLabel, bool), OcrError> {
        let slot = self.slots.lock().entry(key(hash)).or_default().clone();
        let mut guard = slot.lock();
        if let Some(label) = guard.as_ref() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((label.clone(), true));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let label = {
            let _permit = self.acquire();
            self.provider_calls.fetch_add(1, Ordering::Relaxed);
            extract_label(request, provider)?
        };
        *guard = Some(label.clone());
        Ok((label, false))
    }

    /// Cached label without touching the provider or the counters.
    pub fn get(&self, hash: &PerceptualHash) -> Option<OcrLabel> {
        let slot = self.slots.lock().get(&key(hash))?.clone();
        let label = slot.lock().clone();
        label
    }

    /// Like [`LabelCache::get`], but a found label counts as a hit.
    pub fn lookup(&self, hash: &PerceptualHash) -> Option<OcrLabel> {
        let label = self.get(hash)?;
        self.hits.fetch_add(1, Ordering::Relaxed);
        Some(label)
    }

    /// Seeds the cache, e.g. from persisted labels. Existing entries win.
    pub fn insert(&self, hash: &PerceptualHash, label: OcrLabel) {
        let slot = self.slots.lock().entry(key(hash)).or_default().clone();
        let mut guard = slot.lock();
        if guard.is_none() {
            *guard = Some(label);
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            provider_calls: self.provider_calls.load(Ordering::Relaxed),
            entries: self.len() as u64,
        }
    }

    /// Number of cached labels.
    pub fn len(&self) -> usize {
        let slots: Vec<Slot> = self.slots.lock().values().cloned().collect();
        slots.iter().filter(|s| s.lock().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock();
        while *free == 0 {
            self.permit_freed.wait(&mut free);
        }
        *free -= 1;
        Permit { cache: self }
    }
}

impl std::fmt::Debug for LabelCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabelCache")
            .field("stats", &self.stats())
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

struct Permit<'a> {
    cache: &'a LabelCache,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.cache.permits.lock() += 1;
        self.cache.permit_freed.notify_one();
    }
}

fn key(hash: &PerceptualHash) -> Key {
    (hash.kind(), *hash.words())
}

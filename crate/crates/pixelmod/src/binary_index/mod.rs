//! In-memory Hamming-space index over perceptual hashes.
//!
//! Two strategies share one record store:
//!
//! * **Flat**: every query scans every live record. Range results are exact.
//! * **IVF**: records are partitioned by k-majority clustering
//!   ([`BinaryIndex::build_ivf`]); a query only scans the `nprobe` clusters
//!   whose centroids are nearest to it. With `nprobe == nlist` the result is
//!   identical to a flat scan.
//!
//! Hashes are stored as packed `u64` words, one fixed-size slot per record,
//! and distances are computed with popcount.
//!
//! The index itself is not synchronized. Searches take `&self` and mutations
//! take `&mut self`, so wrapping it in an `RwLock` gives the intended
//! many-readers-or-one-writer behaviour.

mod ivf;
mod snapshot;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{hamming_words, HashKind, PerceptualHash, HASH_WORDS};

pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("hash kind mismatch: index holds {expected}, got {actual}")]
    KindMismatch { expected: HashKind, actual: HashKind },
    #[error("id {0:?} is already indexed")]
    DuplicateId(String),
    #[error("radius {radius} exceeds the {width}-bit hash width")]
    InvalidRadius { radius: u32, width: u32 },
    #[error("invalid index configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot build {nlist} clusters from {records} records")]
    TooFewRecords { nlist: u32, records: usize },
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index snapshot (bad magic)")]
    BadMagic,
    #[error("snapshot format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("snapshot checksum mismatch (truncated or corrupted file)")]
    ChecksumMismatch,
    #[error("snapshot is malformed: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IndexKind {
    Flat,
    Ivf,
}

/// Search strategy. `nlist`/`nprobe` only matter for IVF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub kind: IndexKind,
    pub nlist: u32,
    pub nprobe: u32,
}

impl IndexConfig {
    pub fn flat() -> Self {
        IndexConfig {
            kind: IndexKind::Flat,
            nlist: 1,
            nprobe: 1,
        }
    }

    pub fn ivf(nlist: u32, nprobe: u32) -> Self {
        IndexConfig {
            kind: IndexKind::Ivf,
            nlist,
            nprobe,
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.kind == IndexKind::Ivf && (self.nlist == 0 || self.nprobe == 0 || self.nprobe > self.nlist) {
            return Err(IndexError::InvalidConfig(format!(
                "IVF needs nlist >= 1 and 1 <= nprobe <= nlist (nlist={}, nprobe={})",
                self.nlist, self.nprobe
            )));
        }
        Ok(())
    }
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig::flat()
    }
}

/// One matching record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: String,
    pub distance: u32,
}

impl SearchHit {
    /// Canonical result order: distance, then id.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .cmp(&other.distance)
            .then_with(|| self.image_id.cmp(&other.image_id))
    }
}

/// Parameters that reproduce a clustering bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfParams {
    pub nlist: u32,
    pub max_iters: u32,
    pub seed: u64,
}

pub(crate) struct IvfState {
    params: IvfParams,
    /// `nlist * stride` words.
    centroids: Vec<u64>,
    /// Cluster of each record slot.
    assignment: Vec<u32>,
    /// Record slots per cluster, ascending.
    lists: Vec<Vec<u32>>,
}

pub struct BinaryIndex {
    hash_kind: HashKind,
    config: IndexConfig,
    stride: usize,
    ids: Vec<Box<str>>,
    words: Vec<u64>,
    live: Vec<bool>,
    by_id: HashMap<Box<str>, u32>,
    live_count: usize,
    ivf: Option<IvfState>,
}

impl BinaryIndex {
    pub fn new(hash_kind: HashKind, config: IndexConfig) -> Result<Self, IndexError> {
        config.validate()?;
        Ok(BinaryIndex {
            hash_kind,
            config,
            stride: hash_kind.words(),
            ids: Vec::new(),
            words: Vec::new(),
            live: Vec::new(),
            by_id: HashMap::new(),
            live_count: 0,
            ivf: None,
        })
    }

    pub fn flat(hash_kind: HashKind) -> Self {
        Self::new(hash_kind, IndexConfig::flat()).expect("flat config is valid")
    }

    pub fn hash_kind(&self) -> HashKind {
        self.hash_kind
    }

    pub fn config(&self) -> IndexConfig {
        self.config
    }

    /// Number of live (not removed) records.
    pub fn len(&self) -> usize {
        self.live_count
    }

    pub fn is_empty(&self) -> bool {
        self.live_count == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn ivf_params(&self) -> Option<IvfParams> {
        self.ivf.as_ref().map(|s| s.params)
    }

    /// Centroids of the current clustering, if one has been built.
    pub fn centroids(&self) -> Option<Vec<PerceptualHash>> {
        let state = self.ivf.as_ref()?;
        Some(
            state
                .centroids
                .chunks(self.stride)
                .map(|c| self.to_hash(c))
                .collect(),
        )
    }

    /// Cluster of a record, if clustered.
    pub fn cluster_of(&self, id: &str) -> Option<u32> {
        let slot = *self.by_id.get(id)?;
        self.ivf.as_ref().map(|s| s.assignment[slot as usize])
    }

    /// Changes `nprobe` without rebuilding.
    pub fn set_nprobe(&mut self, nprobe: u32) -> Result<(), IndexError> {
        let next = IndexConfig { nprobe, ..self.config };
        next.validate()?;
        self.config = next;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<PerceptualHash> {
        let slot = *self.by_id.get(id)? as usize;
        Some(self.to_hash(self.slot_words(slot)))
    }

    /// Live records in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, PerceptualHash)> + '_ {
        (0..self.ids.len())
            .filter(|&s| self.live[s])
            .map(|s| (&*self.ids[s], self.to_hash(self.slot_words(s))))
    }

    pub fn insert(&mut self, id: &str, hash: &PerceptualHash) -> Result<(), IndexError> {
        self.check_kind(hash)?;
        if self.by_id.contains_key(id) {
            return Err(IndexError::DuplicateId(id.to_string()));
        }
        let slot = self.ids.len() as u32;
        self.ids.push(id.into());
        self.words.extend_from_slice(hash.active_words());
        self.live.push(true);
        self.by_id.insert(id.into(), slot);
        self.live_count += 1;
        if let Some(state) = self.ivf.as_mut() {
            let cluster = ivf::nearest_centroid(&state.centroids, self.stride, hash.active_words());
            state.assignment.push(cluster);
            state.lists[cluster as usize].push(slot);
        }
        Ok(())
    }

    /// Tombstones a record. Its slot is kept until the next snapshot reload.
    pub fn remove(&mut self, id: &str) -> bool {
        match self.by_id.remove(id) {
            Some(slot) => {
                self.live[slot as usize] = false;
                self.live_count -= 1;
                true
            }
            None => false,
        }
    }

    /// Every live record within `radius` of `query` (restricted to the
    /// probed clusters under IVF), in canonical order.
    pub fn search_range(&self, query: &PerceptualHash, radius: u32) -> Result<Vec<SearchHit>, IndexError> {
        self.check_kind(query)?;
        if radius > self.hash_kind.bit_width() {
            return Err(IndexError::InvalidRadius {
                radius,
                width: self.hash_kind.bit_width(),
            });
        }
        let q = query.active_words();
        let mut hits: Vec<SearchHit> = Vec::new();
        self.for_each_candidate(q, |slot, d| {
            if d <= radius {
                hits.push(SearchHit {
                    image_id: self.ids[slot].to_string(),
                    distance: d,
                });
            }
        });
        hits.sort_by(SearchHit::canonical_cmp);
        Ok(hits)
    }

    /// The `k` nearest live records (fewer if the index is smaller), in
    /// canonical order.
    pub fn search_topk(&self, query: &PerceptualHash, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.check_kind(query)?;
        if k == 0 {
            return Err(IndexError::InvalidConfig("k must be at least 1".into()));
        }
        let mut all: Vec<(u32, usize)> = Vec::new();
        self.for_each_candidate(query.active_words(), |slot, d| all.push((d, slot)));
        let cmp = |a: &(u32, usize), b: &(u32, usize)| a.0.cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        Ok(all
            .into_iter()
            .map(|(d, slot)| SearchHit {
                image_id: self.ids[slot].to_string(),
                distance: d,
            })
            .collect())
    }

    /// Runs k-majority clustering over the live records and switches the
    /// index to IVF. `nprobe` is kept if it still fits, otherwise clamped.
    pub fn build_ivf(&mut self, params: IvfParams) -> Result<(), IndexError> {
        if params.nlist == 0 || params.max_iters == 0 {
            return Err(IndexError::InvalidConfig("nlist and max_iters must be positive".into()));
        }
        if self.live_count < params.nlist as usize {
            return Err(IndexError::TooFewRecords {
                nlist: params.nlist,
                records: self.live_count,
            });
        }
        let live_slots: Vec<u32> = (0..self.ids.len() as u32).filter(|&s| self.live[s as usize]).collect();
        let centroids = ivf::k_majority(&self.words, self.stride, &live_slots, params);
        self.install_clustering(params, centroids);
        let nprobe = self.config.nprobe.clamp(1, params.nlist);
        self.config = IndexConfig::ivf(params.nlist, nprobe);
        Ok(())
    }

    /// Assigns every slot (live or not) to its nearest centroid.
    fn install_clustering(&mut self, params: IvfParams, centroids: Vec<u64>) {
        let n = self.ids.len();
        let mut assignment = Vec::with_capacity(n);
        let mut lists = vec![Vec::new(); params.nlist as usize];
        for slot in 0..n {
            let c = ivf::nearest_centroid(&centroids, self.stride, self.slot_words(slot));
            assignment.push(c);
            lists[c as usize].push(slot as u32);
        }
        self.ivf = Some(IvfState {
            params,
            centroids,
            assignment,
            lists,
        });
    }

    fn for_each_candidate(&self, q: &[u64], mut visit: impl FnMut(usize, u32)) {
        let mut scan = |slot: usize| {
            if self.live[slot] {
                visit(slot, hamming_words(q, self.slot_words(slot)));
            }
        };
        match (&self.ivf, self.config.kind) {
            (Some(state), IndexKind::Ivf) => {
                for cluster in ivf::probe_order(&state.centroids, self.stride, q, self.config.nprobe as usize) {
                    for &slot in &state.lists[cluster as usize] {
                        scan(slot as usize);
                    }
                }
            }
            _ => (0..self.ids.len()).for_each(scan),
        }
    }

    #[inline]
    fn slot_words(&self, slot: usize) -> &[u64] {
        &self.words[slot * self.stride..(slot + 1) * self.stride]
    }

    fn to_hash(&self, words: &[u64]) -> PerceptualHash {
        let mut full = [0u64; HASH_WORDS];
        full[..words.len()].copy_from_slice(words);
        PerceptualHash::from_words(self.hash_kind, full)
    }

    fn check_kind(&self, hash: &PerceptualHash) -> Result<(), IndexError> {
        if hash.kind() != self.hash_kind {
            return Err(IndexError::KindMismatch {
                expected: self.hash_kind,
                actual: hash.kind(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Debug for BinaryIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryIndex")
            .field("hash_kind", &self.hash_kind)
            .field("config", &self.config)
            .field("len", &self.live_count)
            .field("ivf", &self.ivf_params())
            .finish()
    }
}

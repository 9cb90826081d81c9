//! Durable corpus: images stored by content digest, both hashes, OCR labels
//! and seed sets.
//!
//! Layout under the store root:
//!
//! ```text
//! journal.log                      events, replayed on open
//! blobs/<2 hex>/<digest>.<ext>     image bytes
//! blobs/<2 hex>/<digest>.<ext>.ocr.txt   copied OCR sidecar, if any
//! ```
//!
//! Every mutation is one journal event, written after any blob it refers
//! to. Ingest is idempotent, so re-running a manifest after an interrupted
//! run reaches the same state as an uninterrupted one.

mod journal;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binary_index::{BinaryIndex, IndexError};
use crate::calibration::{EvalCorpus, EvalRecord};
use crate::hashing::{decode_image, hash_plane, HashKind, PerceptualHash};
use crate::ocr::{extract_label, sidecar_path, LabelCache, OcrLabel, OcrProvider, OcrRequest};
use crate::pipeline::{ImageData, ImageSource, Seed};

use journal::Journal;

const JOURNAL_FILE: &str = "journal.log";
const LOCK_FILE: &str = "LOCK";
const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store {} is open in another process", .0.display())]
    Locked(PathBuf),
    #[error("store is corrupt: {0}")]
    Corrupt(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("unknown seed set {0:?}")]
    UnknownSeedSet(String),
    #[error("seed set {0:?} already exists")]
    SeedSetExists(String),
    #[error("image {image_id:?} is already in seed set {set:?}")]
    AlreadyMember { set: String, image_id: String },
    #[error("seed set {set:?} is at version {actual}, not {expected}")]
    VersionConflict { set: String, expected: u64, actual: u64 },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("imported hash for {0:?} differs from the stored one")]
    HashMismatch(String),
    #[error("index disagrees with the store: {0}")]
    Reconcile(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// One line of an ingest manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_text: Option<String>,
    /// OCR text file for the image; defaults to `<path>.ocr.txt` when that
    /// exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_sidecar: Option<PathBuf>,
}

/// Where an image was seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_text: Option<String>,
    /// Path the bytes were read from.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Hex SHA-256 of the bytes.
    pub image_id: String,
    pub sources: Vec<SourceRef>,
    /// Blob path relative to the store root.
    pub storage_path: PathBuf,
    pub phash64: PerceptualHash,
    pub pdq256: PerceptualHash,
    pub pdq_quality: u8,
    /// Hex SHA-256 of the stored label's raw text, once labelled.
    #[serde(default)]
    pub ocr_label_id: Option<String>,
    pub ingested_at_ms: u64,
}

impl ImageRecord {
    pub fn hash(&self, kind: HashKind) -> PerceptualHash {
        match kind {
            HashKind::Phash64 => self.phash64,
            HashKind::Pdq256 => PerceptualHash::pdq(*self.pdq256.words(), self.pdq_quality),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SeedProvenance {
    Imported,
    Promoted { from_candidate: String, reviewer: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedMember {
    pub image_id: String,
    pub provenance: SeedProvenance,
}

/// A named set of seed images. `version` grows by one on every change,
/// creation included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub name: String,
    pub members: Vec<SeedMember>,
    pub version: u64,
}

impl SeedSet {
    pub fn contains(&self, image_id: &str) -> bool {
        self.members.iter().any(|m| m.image_id == image_id)
    }
}

/// A seed set with hashes inline, for moving between stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSetExport {
    pub name: String,
    pub version: u64,
    pub members: Vec<ExportedMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedMember {
    pub image_id: String,
    pub provenance: SeedProvenance,
    pub phash64: PerceptualHash,
    pub pdq256: PerceptualHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub set: SeedSet,
    /// Members whose images this store lacks; they are not imported.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub line: usize,
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub entries: usize,
    /// New images stored.
    pub ingested: usize,
    /// Entries whose bytes were already stored.
    pub duplicates: usize,
    pub failed: usize,
    pub errors: Vec<IngestFailure>,
    /// Stored id of each entry that succeeded, in manifest order.
    #[serde(skip)]
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Added,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labelled: usize,
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    /// Sync the journal to disk after every event.
    pub fsync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { fsync: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    ImageAdded { record: ImageRecord },
    SourceAdded { image_id: String, source: SourceRef },
    LabelRecorded { image_id: String, raw: String, coverage: Option<f64> },
    SeedSetCreated { name: String },
    SeedMemberAdded { name: String, member: SeedMember },
}

pub struct CorpusStore {
    root: PathBuf,
    /// Held for the store's lifetime; one process writes a store at a time.
    _lock: std::fs::File,
    journal: Journal,
    records: BTreeMap<String, ImageRecord>,
    by_post: HashMap<String, String>,
    labels: HashMap<String, OcrLabel>,
    seed_sets: BTreeMap<String, SeedSet>,
    phash: BinaryIndex,
    pdq: BinaryIndex,
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn extension_of(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Png) => "png",
        Ok(image::ImageFormat::Jpeg) => "jpg",
        _ => "bin",
    }
}

/// Writes through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("blob paths have a parent");
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Parses a whole manifest before anything is ingested; any bad line
/// aborts. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, ManifestEntry)>, StoreError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| StoreError::Manifest {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, entry));
    }
    Ok(out)
}

impl CorpusStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl Into<PathBuf>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join(BLOB_DIR))?;
        let lock = std::fs::File::create(root.join(LOCK_FILE))?;
        lock.try_lock().map_err(|e| match e {
            std::fs::TryLockError::WouldBlock => StoreError::Locked(root.clone()),
            std::fs::TryLockError::Error(e) => StoreError::Io(e),
        })?;
        let (journal, events, _) = Journal::open::<Event>(&root.join(JOURNAL_FILE), options.fsync)?;
        let mut store = CorpusStore {
            root,
            _lock: lock,
            journal,
            records: BTreeMap::new(),
            by_post: HashMap::new(),
            labels: HashMap::new(),
            seed_sets: BTreeMap::new(),
            phash: BinaryIndex::flat(HashKind::Phash64),
            pdq: BinaryIndex::flat(HashKind::Pdq256),
        };
        for event in events {
            store.apply(event)?;
        }
        store.reconcile()?;
        Ok(store)
    }

    fn apply(&mut self, event: Event) -> Result<(), StoreError> {
        match event {
            Event::ImageAdded { mut record } => {
                // the serialized hash does not carry PDQ quality
                record.pdq256 = record.hash(HashKind::Pdq256);
                let id = record.image_id.clone();
                self.phash.insert(&id, &record.phash64)?;
                self.pdq.insert(&id, &record.pdq256)?;
                for s in &record.sources {
                    if let Some(p) = &s.post_id {
                        self.by_post.insert(p.clone(), id.clone());
                    }
                }
                self.records.insert(id, record);
            }
            Event::SourceAdded { image_id, source } => {
                let record = self
                    .records
                    .get_mut(&image_id)
                    .ok_or_else(|| StoreError::Corrupt(format!("source for unknown image {image_id}")))?;
                if let Some(p) = &source.post_id {
                    self.by_post.insert(p.clone(), image_id.clone());
                }
                record.sources.push(source);
            }
            Event::LabelRecorded { image_id, raw, coverage } => {
                let record = self
                    .records
                    .get_mut(&image_id)
                    .ok_or_else(|| StoreError::Corrupt(format!("label for unknown image {image_id}")))?;
                record.ocr_label_id = Some(digest_hex(raw.as_bytes()));
                let mut label = OcrLabel::from_raw(raw);
                label.coverage = coverage;
                self.labels.insert(image_id, label);
            }
            Event::SeedSetCreated { name } => {
                self.seed_sets.insert(
                    name.clone(),
                    SeedSet {
                        name,
                        members: Vec::new(),
                        version: 1,
                    },
                );
            }
            Event::SeedMemberAdded { name, member } => {
                let set = self
                    .seed_sets
                    .get_mut(&name)
                    .ok_or_else(|| StoreError::Corrupt(format!("member for unknown seed set {name}")))?;
                set.members.push(member);
                set.version += 1;
            }
        }
        Ok(())
    }

    fn commit(&mut self, event: Event) -> Result<(), StoreError> {
        self.journal.append(&event)?;
        self.apply(event)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.get(image_id)
    }

    /// Records in image id order.
    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    /// The image most recently ingested under `post_id`.
    pub fn image_for_post(&self, post_id: &str) -> Option<&str> {
        self.by_post.get(post_id).map(String::as_str)
    }

    pub fn index(&self, kind: HashKind) -> &BinaryIndex {
        match kind {
            HashKind::Phash64 => &self.phash,
            HashKind::Pdq256 => &self.pdq,
        }
    }

    /// Checks that both indexes hold exactly the stored images.
    pub fn reconcile(&self) -> Result<(), StoreError> {
        for kind in [HashKind::Phash64, HashKind::Pdq256] {
            let index = self.index(kind);
            if index.len() != self.records.len() {
                return Err(StoreError::Reconcile(format!(
                    "{kind} index holds {} images, store {}",
                    index.len(),
                    self.records.len()
                )));
            }
            if let Some(id) = self.records.keys().find(|id| !index.contains(id)) {
                return Err(StoreError::Reconcile(format!("{id} missing from the {kind} index")));
            }
        }
        Ok(())
    }

    pub fn blob_path(&self, image_id: &str) -> Option<PathBuf> {
        self.get(image_id).map(|r| self.root.join(&r.storage_path))
    }

    /// Ingests every entry of a manifest file.
    pub fn ingest_manifest(&mut self, manifest: &Path) -> Result<IngestSummary, StoreError> {
        let entries = read_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        self.ingest_entries(&entries, base)
    }

    /// Ingests parsed entries. Unreadable or undecodable images are listed
    /// in the summary and skipped; only store I/O failures abort.
    pub fn ingest_entries(&mut self, entries: &[(usize, ManifestEntry)], base: &Path) -> Result<IngestSummary, StoreError> {
        let mut summary = IngestSummary {
            entries: entries.len(),
            ..Default::default()
        };
        for (line, entry) in entries {
            let path = base.join(&entry.path);
            let fail = |error: String| IngestFailure {
                line: *line,
                path: path.display().to_string(),
                error,
            };
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    summary.failed += 1;
                    summary.errors.push(fail(e.to_string()));
                    continue;
                }
            };
            let sidecar = match &entry.ocr_sidecar {
                Some(p) => Some(base.join(p)),
                None => Some(sidecar_path(&path)).filter(|p| p.is_file()),
            };
            let source = SourceRef {
                post_id: entry.post_id.clone(),
                post_text: entry.post_text.clone(),
                origin: path.display().to_string(),
            };
            match self.ingest_bytes(&bytes, source, sidecar.as_deref()) {
                Ok((id, outcome)) => {
                    match outcome {
                        IngestOutcome::Added => summary.ingested += 1,
                        IngestOutcome::Duplicate => summary.duplicates += 1,
                    }
                    summary.image_ids.push(id);
                }
                Err(StoreError::Validation(msg)) => {
                    summary.failed += 1;
                    summary.errors.push(fail(msg));
                }
                Err(StoreError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                    summary.failed += 1;
                    summary.errors.push(fail(format!("sidecar: {e}")));
                }
                Err(e) => return Err(e),
            }
        }
        self.reconcile()?;
        Ok(summary)
    }

    /// Stores one image. Known bytes gain `source` unless it is already
    /// recorded.
    pub fn ingest_bytes(
        &mut self,
        bytes: &[u8],
        source: SourceRef,
        sidecar: Option<&Path>,
    ) -> Result<(String, IngestOutcome), StoreError> {
        let image_id = digest_hex(bytes);
        if let Some(record) = self.records.get(&image_id) {
            if !record.sources.contains(&source) {
                self.commit(Event::SourceAdded {
                    image_id: image_id.clone(),
                    source,
                })?;
            }
            return Ok((image_id, IngestOutcome::Duplicate));
        }
        let plane = decode_image(bytes).map_err(|e| StoreError::Validation(e.to_string()))?;
        let phash64 = hash_plane(&plane, HashKind::Phash64);
        let pdq256 = hash_plane(&plane, HashKind::Pdq256);
        let storage_path = PathBuf::from(BLOB_DIR)
            .join(&image_id[..2])
            .join(format!("{image_id}.{}", extension_of(bytes)));
        let blob = self.root.join(&storage_path);
        if let Some(sidecar) = sidecar {
            let text = std::fs::read(sidecar)?;
            write_atomic(&sidecar_path(&blob), &text)?;
        }
        write_atomic(&blob, bytes)?;
        let record = ImageRecord {
            image_id: image_id.clone(),
            sources: vec![source],
            storage_path,
            phash64,
            pdq_quality: pdq256.quality().unwrap_or(100),
            pdq256,
            ocr_label_id: None,
            ingested_at_ms: now_ms(),
        };
        self.commit(Event::ImageAdded { record })?;
        Ok((image_id, IngestOutcome::Added))
    }

    pub fn record_label(&mut self, image_id: &str, label: &OcrLabel) -> Result<(), StoreError> {
        if !self.records.contains_key(image_id) {
            return Err(StoreError::UnknownImage(image_id.to_string()));
        }
        self.commit(Event::LabelRecorded {
            image_id: image_id.to_string(),
            raw: label.raw.clone(),
            coverage: label.coverage,
        })
    }

    pub fn label(&self, image_id: &str) -> Option<&OcrLabel> {
        self.labels.get(image_id)
    }

    /// OCRs every image without a stored label and stores the results.
    pub fn label_missing(&mut self, provider: &dyn OcrProvider) -> Result<LabelSummary, StoreError> {
        let todo: Vec<String> = self
            .records
            .keys()
            .filter(|id| !self.labels.contains_key(*id))
            .cloned()
            .collect();
        let mut summary = LabelSummary::default();
        for id in todo {
            let path = self.blob_path(&id).expect("listed id");
            let bytes = std::fs::read(&path)?;
            match extract_label(&OcrRequest::with_source(&bytes, &path), provider) {
                Ok(label) => {
                    self.record_label(&id, &label)?;
                    summary.labelled += 1;
                }
                Err(e) => summary.failed.push((id, e.to_string())),
            }
        }
        Ok(summary)
    }

    /// Loads stored labels into `cache` under both hashes of each image.
    pub fn warm_cache(&self, cache: &LabelCache) {
        for (id, label) in &self.labels {
            let record = &self.records[id];
            for kind in [HashKind::Phash64, HashKind::Pdq256] {
                cache.insert(&record.hash(kind), label.clone());
            }
        }
    }

    /// Labelled images as a calibration corpus.
    pub fn eval_corpus(&self) -> EvalCorpus {
        let mut corpus = EvalCorpus::new();
        for (id, label) in &self.labels {
            let r = &self.records[id];
            corpus
                .insert(EvalRecord {
                    id: id.clone(),
                    phash: r.phash64,
                    pdq: r.hash(HashKind::Pdq256),
                    label: label.clone(),
                })
                .expect("store ids are unique");
        }
        corpus
    }

    pub fn seed_set(&self, name: &str) -> Option<&SeedSet> {
        self.seed_sets.get(name)
    }

    pub fn seed_sets(&self) -> impl Iterator<Item = &SeedSet> {
        self.seed_sets.values()
    }

    fn require_image(&self, image_id: &str) -> Result<(), StoreError> {
        if self.records.contains_key(image_id) {
            Ok(())
        } else {
            Err(StoreError::UnknownImage(image_id.to_string()))
        }
    }

    /// Creates a seed set whose members are all `IMPORTED`.
    pub fn create_seed_set(&mut self, name: &str, image_ids: &[String]) -> Result<SeedSet, StoreError> {
        if name.trim().is_empty() {
            return Err(StoreError::Validation("seed set name is empty".into()));
        }
        if self.seed_sets.contains_key(name) {
            return Err(StoreError::SeedSetExists(name.to_string()));
        }
        for id in image_ids {
            self.require_image(id)?;
        }
        self.commit(Event::SeedSetCreated { name: name.to_string() })?;
        for id in image_ids {
            if self.seed_sets[name].contains(id) {
                continue;
            }
            self.commit(Event::SeedMemberAdded {
                name: name.to_string(),
                member: SeedMember {
                    image_id: id.clone(),
                    provenance: SeedProvenance::Imported,
                },
            })?;
        }
        Ok(self.seed_sets[name].clone())
    }

    /// Adds one member. With `expected_version` set, fails unless the set
    /// is still at that version.
    pub fn add_seed_member(
        &mut self,
        name: &str,
        image_id: &str,
        provenance: SeedProvenance,
        expected_version: Option<u64>,
    ) -> Result<SeedSet, StoreError> {
        let set = self
            .seed_sets
            .get(name)
            .ok_or_else(|| StoreError::UnknownSeedSet(name.to_string()))?;
        if let Some(expected) = expected_version {
            if expected != set.version {
                return Err(StoreError::VersionConflict {
                    set: name.to_string(),
                    expected,
                    actual: set.version,
                });
            }
        }
        self.require_image(image_id)?;
        if set.contains(image_id) {
            return Err(StoreError::AlreadyMember {
                set: name.to_string(),
                image_id: image_id.to_string(),
            });
        }
        self.commit(Event::SeedMemberAdded {
            name: name.to_string(),
            member: SeedMember {
                image_id: image_id.to_string(),
                provenance,
            },
        })?;
        Ok(self.seed_sets[name].clone())
    }

    /// Adds an approved candidate to a seed set on behalf of `reviewer`.
    pub fn promote_to_seed(
        &mut self,
        name: &str,
        candidate_id: &str,
        reviewer: &str,
        expected_version: Option<u64>,
    ) -> Result<SeedSet, StoreError> {
        if reviewer.trim().is_empty() {
            return Err(StoreError::Validation("reviewer id is empty".into()));
        }
        self.add_seed_member(
            name,
            candidate_id,
            SeedProvenance::Promoted {
                from_candidate: candidate_id.to_string(),
                reviewer: reviewer.to_string(),
            },
            expected_version,
        )
    }

    /// Pipeline seeds for every member, each excluded from its own results.
    pub fn seeds(&self, name: &str, kind: HashKind) -> Result<Vec<Seed>, StoreError> {
        let set = self
            .seed_sets
            .get(name)
            .ok_or_else(|| StoreError::UnknownSeedSet(name.to_string()))?;
        set.members
            .iter()
            .map(|m| self.seed_for(&m.image_id, kind))
            .collect()
    }

    /// A seed for one stored image.
    pub fn seed_for(&self, image_id: &str, kind: HashKind) -> Result<Seed, StoreError> {
        let record = self
            .get(image_id)
            .ok_or_else(|| StoreError::UnknownImage(image_id.to_string()))?;
        let path = self.root.join(&record.storage_path);
        Ok(Seed {
            query_id: image_id.to_string(),
            image: ImageData {
                bytes: std::fs::read(&path)?,
                path: Some(path),
            },
            corpus_id: Some(image_id.to_string()),
            hash: Some(record.hash(kind)),
        })
    }

    pub fn export_seed_set(&self, name: &str) -> Result<SeedSetExport, StoreError> {
        let set = self
            .seed_sets
            .get(name)
            .ok_or_else(|| StoreError::UnknownSeedSet(name.to_string()))?;
        Ok(SeedSetExport {
            name: set.name.clone(),
            version: set.version,
            members: set
                .members
                .iter()
                .map(|m| {
                    let r = &self.records[&m.image_id];
                    ExportedMember {
                        image_id: m.image_id.clone(),
                        provenance: m.provenance.clone(),
                        phash64: r.phash64,
                        pdq256: r.pdq256,
                    }
                })
                .collect(),
        })
    }

    /// Recreates an exported set here. Members must already be stored with
    /// the same hashes; absent images are reported and skipped.
    pub fn import_seed_set(&mut self, export: &SeedSetExport) -> Result<ImportSummary, StoreError> {
        if self.seed_sets.contains_key(&export.name) {
            return Err(StoreError::SeedSetExists(export.name.clone()));
        }
        let mut present = Vec::new();
        let mut missing = Vec::new();
        for m in &export.members {
            match self.get(&m.image_id) {
                Some(r) if r.phash64 == m.phash64 && r.pdq256.words() == m.pdq256.words() => present.push(m),
                Some(_) => return Err(StoreError::HashMismatch(m.image_id.clone())),
                None => missing.push(m.image_id.clone()),
            }
        }
        self.commit(Event::SeedSetCreated {
            name: export.name.clone(),
        })?;
        for m in present {
            self.commit(Event::SeedMemberAdded {
                name: export.name.clone(),
                member: SeedMember {
                    image_id: m.image_id.clone(),
                    provenance: m.provenance.clone(),
                },
            })?;
        }
        Ok(ImportSummary {
            set: self.seed_sets[&export.name].clone(),
            missing,
        })
    }
}

impl ImageSource for CorpusStore {
    fn load(&self, image_id: &str) -> Result<ImageData, String> {
        let path = self
            .blob_path(image_id)
            .ok_or_else(|| format!("unknown image {image_id:?}"))?;
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(ImageData { bytes, path: Some(path) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocr::SidecarProvider;
    use crate::synth::{encode_png, scene};

    fn fast(dir: &Path) -> CorpusStore {
        CorpusStore::open_with(dir, StoreOptions { fsync: false }).unwrap()
    }

    fn write_images(dir: &Path, n: u64) -> Vec<PathBuf> {
        (0..n)
            .map(|i| {
                let p = dir.join(format!("img{i}.png"));
                std::fs::write(&p, encode_png(&scene(100 + i, 64, 48))).unwrap();
                std::fs::write(sidecar_path(&p), format!("caption {i}")).unwrap();
                p
            })
            .collect()
    }

    fn manifest(dir: &Path, lines: &[ManifestEntry]) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        let text: String = lines
            .iter()
            .map(|l| serde_json::to_string(l).unwrap() + "\n")
            .collect();
        std::fs::write(&p, text).unwrap();
        p
    }

    fn entry(path: &str, post: &str) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            post_id: Some(post.into()),
            post_text: None,
            ocr_sidecar: None,
        }
    }

    #[test]
    fn second_open_is_refused() {
        let root = tempfile::tempdir().unwrap();
        let store = fast(root.path());
        assert!(matches!(
            CorpusStore::open_with(root.path(), StoreOptions { fsync: false }),
            Err(StoreError::Locked(_))
        ));
        drop(store);
        fast(root.path());
    }

    #[test]
    fn empty_manifest() {
        let src = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        let mut store = fast(root.path());
        let s = store.ingest_manifest(&manifest(src.path(), &[])).unwrap();
        assert_eq!(s, IngestSummary::default());
    }

    #[test]
    fn duplicates_append_sources_once() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 1);
        let root = tempfile::tempdir().unwrap();
        let mut store = fast(root.path());
        let m = manifest(src.path(), &[entry("img0.png", "p1"), entry("img0.png", "p2")]);
        let s = store.ingest_manifest(&m).unwrap();
        assert_eq!((s.ingested, s.duplicates, s.failed), (1, 1, 0));
        assert_eq!(store.len(), 1);
        let r = store.records().next().unwrap().clone();
        assert_eq!(r.sources.len(), 2);
        assert_eq!(r.image_id, digest_hex(&std::fs::read(src.path().join("img0.png")).unwrap()));
        // idempotent
        store.ingest_manifest(&m).unwrap();
        assert_eq!(store.records().next().unwrap().sources.len(), 2);
        assert_eq!(store.image_for_post("p2"), Some(r.image_id.as_str()));
        // sidecar travelled with the blob
        let blob = store.blob_path(&r.image_id).unwrap();
        assert_eq!(std::fs::read_to_string(sidecar_path(&blob)).unwrap(), "caption 0");
    }

    #[test]
    fn per_entry_failures_and_manifest_errors() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 1);
        std::fs::write(src.path().join("junk.png"), b"not an image").unwrap();
        let root = tempfile::tempdir().unwrap();
        let mut store = fast(root.path());
        let m = manifest(
            src.path(),
            &[entry("img0.png", "a"), entry("missing.png", "b"), entry("junk.png", "c")],
        );
        let s = store.ingest_manifest(&m).unwrap();
        assert_eq!((s.ingested, s.failed), (1, 2));
        assert_eq!(s.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);

        let bad = src.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"path\":\"img0.png\"}\n{\"path\":1}\n").unwrap();
        let before = store.len();
        assert!(matches!(store.ingest_manifest(&bad), Err(StoreError::Manifest { line: 2, .. })));
        assert_eq!(store.len(), before);
        std::fs::write(&bad, "{\"path\":\"img0.png\",\"extra\":true}\n").unwrap();
        assert!(store.ingest_manifest(&bad).is_err());
    }

    #[test]
    fn reopen_restores_everything() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 3);
        let root = tempfile::tempdir().unwrap();
        let ids: Vec<String>;
        {
            let mut store = fast(root.path());
            let m = manifest(src.path(), &[entry("img0.png", "a"), entry("img1.png", "b"), entry("img2.png", "c")]);
            store.ingest_manifest(&m).unwrap();
            store.label_missing(&SidecarProvider).unwrap();
            ids = store.records().map(|r| r.image_id.clone()).collect();
            store.create_seed_set("s", &ids[..1]).unwrap();
            store.promote_to_seed("s", &ids[1], "alice", Some(2)).unwrap();
        }
        let store = fast(root.path());
        assert_eq!(store.len(), 3);
        assert_eq!(store.index(HashKind::Pdq256).len(), 3);
        assert_eq!(store.index(HashKind::Phash64).len(), 3);
        let a = store.image_for_post("a").unwrap();
        assert_eq!(store.label(a).unwrap().normalized, "caption 0");
        assert!(store.get(a).unwrap().ocr_label_id.is_some());
        let set = store.seed_set("s").unwrap();
        assert_eq!(set.version, 3);
        assert_eq!(set.members[1].provenance, SeedProvenance::Promoted {
            from_candidate: ids[1].clone(),
            reviewer: "alice".into()
        });
        let corpus = store.eval_corpus();
        assert_eq!(corpus.len(), 3);
    }

    #[test]
    fn seed_set_lifecycle() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 2);
        let root = tempfile::tempdir().unwrap();
        let mut store = fast(root.path());
        store
            .ingest_manifest(&manifest(src.path(), &[entry("img0.png", "a"), entry("img1.png", "b")]))
            .unwrap();
        let a = store.image_for_post("a").unwrap().to_string();
        let b = store.image_for_post("b").unwrap().to_string();
        let set = store.create_seed_set("s", std::slice::from_ref(&a)).unwrap();
        assert_eq!(set.version, 2);
        assert!(matches!(store.create_seed_set("s", &[]), Err(StoreError::SeedSetExists(_))));
        assert!(matches!(
            store.create_seed_set("t", &["nope".to_string()]),
            Err(StoreError::UnknownImage(_))
        ));
        assert!(matches!(store.promote_to_seed("s", &b, " ", None), Err(StoreError::Validation(_))));
        assert!(matches!(
            store.promote_to_seed("s", "nope", "r", None),
            Err(StoreError::UnknownImage(_))
        ));
        assert!(matches!(
            store.promote_to_seed("s", &b, "r", Some(1)),
            Err(StoreError::VersionConflict { actual: 2, .. })
        ));
        let set = store.promote_to_seed("s", &b, "r", Some(2)).unwrap();
        assert_eq!(set.version, 3);
        assert!(matches!(
            store.promote_to_seed("s", &b, "r", None),
            Err(StoreError::AlreadyMember { .. })
        ));
        assert!(matches!(store.promote_to_seed("zzz", &b, "r", None), Err(StoreError::UnknownSeedSet(_))));
        let seeds = store.seeds("s", HashKind::Pdq256).unwrap();
        assert_eq!(seeds.len(), 2);
        assert_eq!(seeds[1].corpus_id.as_deref(), Some(b.as_str()));
        assert_eq!(seeds[1].hash.unwrap().kind(), HashKind::Pdq256);
    }

    #[test]
    fn export_import_between_stores() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 2);
        let m = manifest(src.path(), &[entry("img0.png", "a"), entry("img1.png", "b")]);
        let r1 = tempfile::tempdir().unwrap();
        let mut one = fast(r1.path());
        one.ingest_manifest(&m).unwrap();
        let ids: Vec<String> = one.records().map(|r| r.image_id.clone()).collect();
        one.create_seed_set("s", &ids).unwrap();
        let json = serde_json::to_string(&one.export_seed_set("s").unwrap()).unwrap();
        let export: SeedSetExport = serde_json::from_str(&json).unwrap();

        let r2 = tempfile::tempdir().unwrap();
        let mut two = fast(r2.path());
        two.ingest_manifest(&manifest(src.path(), &[entry("img0.png", "a")])).unwrap();
        let summary = two.import_seed_set(&export).unwrap();
        assert_eq!(summary.set.members.len(), 1);
        assert_eq!(summary.missing.len(), 1);
        assert!(two.import_seed_set(&export).is_err());

        let mut tampered = export.clone();
        tampered.name = "t".into();
        tampered.members[0].phash64 = tampered.members[0].phash64.complement();
        let r3 = tempfile::tempdir().unwrap();
        let mut three = fast(r3.path());
        three.ingest_manifest(&m).unwrap();
        assert!(matches!(three.import_seed_set(&tampered), Err(StoreError::HashMismatch(_))));
    }

    #[test]
    fn interrupted_ingest_replays_to_same_state() {
        let src = tempfile::tempdir().unwrap();
        write_images(src.path(), 6);
        let lines: Vec<ManifestEntry> = (0..6).map(|i| entry(&format!("img{i}.png"), &format!("p{i}"))).collect();
        let full = manifest(src.path(), &lines);

        let clean_root = tempfile::tempdir().unwrap();
        let mut clean = fast(clean_root.path());
        clean.ingest_manifest(&full).unwrap();

        let root = tempfile::tempdir().unwrap();
        {
            let mut store = fast(root.path());
            let part = src.path().join("part.jsonl");
            std::fs::copy(&full, &part).unwrap();
            let text = std::fs::read_to_string(&full).unwrap();
            std::fs::write(&part, text.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
            store.ingest_manifest(&part).unwrap();
        }
        // a crash mid-append leaves half a frame behind
        let journal = root.path().join(JOURNAL_FILE);
        let mut bytes = std::fs::read(&journal).unwrap();
        bytes.extend_from_slice(&[200, 1, 0, 0, 7, 7, 7]);
        std::fs::write(&journal, bytes).unwrap();

        let mut store = fast(root.path());
        assert_eq!(store.len(), 3);
        store.ingest_manifest(&full).unwrap();
        let strip = |s: &CorpusStore| -> Vec<(String, Vec<SourceRef>, PerceptualHash, PerceptualHash)> {
            s.records()
                .map(|r| (r.image_id.clone(), r.sources.clone(), r.phash64, r.pdq256))
                .collect()
        };
        assert_eq!(strip(&store), strip(&clean));
        store.reconcile().unwrap();
        drop(store);
        let reopened = fast(root.path());
        assert_eq!(strip(&reopened), strip(&clean));
    }
}

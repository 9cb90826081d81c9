//! Service state and the blocking operations behind each endpoint.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use pixelmod::corpus_store::{CorpusStore, IngestSummary, LabelSummary, ManifestEntry, SeedProvenance, SeedSet, StoreOptions};
use pixelmod::hashing::HashKind;
use pixelmod::ocr::{CacheStats, LabelCache, OcrProvider};
use pixelmod::pipeline::{
    BatchCandidate, Pipeline, PipelineConfig, Provenance, QueryReport, QueryResult, Seed, SeedOutcome,
    StageTimings,
};
use pixelmod::stories::{apply_flags, cluster, ClusterParams, ImageStory};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::config::{Config, ConfigError};
use crate::error::ApiError;

const RESULTS_DIR: &str = "results";
const REVIEWS_FILE: &str = "reviews.jsonl";
const STORIES_FILE: &str = "stories.json";
/// Manifest entries ingested per write-lock hold, so queries interleave.
const INGEST_CHUNK: usize = 32;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Candidates of one query or batch, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_set_version: Option<u64>,
    pub config: PipelineConfig,
    pub candidates: Vec<BatchCandidate>,
    pub seeds: Vec<SeedOutcome>,
    pub ocr_calls_made: usize,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Approve,
    Dismiss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promotion {
    pub seed_set: String,
    pub version: u64,
}

/// One entry of the append-only review log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub seq: u64,
    pub query_id: String,
    pub image_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promoted: Option<Promotion>,
}

#[derive(Default)]
struct ReviewLog {
    records: Vec<ReviewRecord>,
    latest: HashMap<(String, String), usize>,
}

impl ReviewLog {
    fn push(&mut self, record: ReviewRecord) {
        self.latest
            .insert((record.query_id.clone(), record.image_id.clone()), self.records.len());
        self.records.push(record);
    }

    fn latest(&self, query_id: &str, image_id: &str) -> Option<&ReviewRecord> {
        self.latest
            .get(&(query_id.to_string(), image_id.to_string()))
            .map(|&i| &self.records[i])
    }

    /// Images whose latest verdict under some query is an approval.
    fn approved_images(&self) -> std::collections::HashSet<&str> {
        self.latest
            .values()
            .map(|&i| &self.records[i])
            .filter(|r| r.verdict == Verdict::Approve)
            .map(|r| r.image_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorySnapshot {
    pub eps: u32,
    pub min_cluster_size: usize,
    /// Result set whose accepted candidates were clustered; all stored
    /// images when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub built_at_ms: u64,
    pub stories: Vec<ImageStory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    Ingest,
    BatchQuery,
    StoriesRebuild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub submitted_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

pub(crate) enum JobWork {
    Ingest {
        entries: Vec<(usize, ManifestEntry)>,
        base: PathBuf,
        label: bool,
        seed_set: Option<String>,
    },
    BatchQuery {
        seed_set: String,
        config: PipelineConfig,
    },
    StoriesRebuild {
        params: ClusterParams,
        query: Option<String>,
    },
}

impl JobWork {
    fn kind(&self) -> JobKind {
        match self {
            JobWork::Ingest { .. } => JobKind::Ingest,
            JobWork::BatchQuery { .. } => JobKind::BatchQuery,
            JobWork::StoriesRebuild { .. } => JobKind::StoriesRebuild,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestJobSummary {
    pub ingest: IngestSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_set: Option<SeedSet>,
}

#[derive(Default)]
struct QueryStats {
    queries: u64,
    total_ms: f64,
    max_ms: f64,
    stages: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub images: usize,
    pub queries: u64,
    pub query_ms_mean: f64,
    pub query_ms_max: f64,
    pub stage_ms_mean: StageTimings,
    pub ocr_cache: CacheStats,
    /// Hits over lookups; 0 before any lookup.
    pub ocr_cache_hit_rate: f64,
    pub reviews: usize,
    pub jobs: BTreeMap<String, usize>,
}

/// Everything the handlers share.
pub struct Shared {
    pub config: Config,
    pub token: Option<String>,
    store: RwLock<CorpusStore>,
    cache: LabelCache,
    provider: Arc<dyn OcrProvider>,
    seq: AtomicU64,
    jobs: Mutex<BTreeMap<String, Job>>,
    queue: mpsc::UnboundedSender<(String, JobWork)>,
    results: RwLock<HashMap<String, Arc<ResultSet>>>,
    reviews: Mutex<ReviewLog>,
    stories: RwLock<Option<StorySnapshot>>,
    stats: Mutex<QueryStats>,
    pub(crate) idempotency: Mutex<HashMap<String, crate::api::IdempotentSlot>>,
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] pixelmod::corpus_store::StoreError),
    #[error("{}: {message}", path.display())]
    State { path: PathBuf, message: String },
}

fn state_error(path: &Path, e: impl std::fmt::Display) -> StartupError {
    StartupError::State {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn numeric_suffix(id: &str) -> u64 {
    id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(0)
}

impl Shared {
    /// Opens the store and persisted service state, and starts the job
    /// worker. Must run inside a Tokio runtime.
    pub fn start(config: Config) -> Result<Arc<Self>, StartupError> {
        let provider = config.ocr.build()?;
        Self::start_with_provider(config, provider)
    }

    pub fn start_with_provider(config: Config, provider: Arc<dyn OcrProvider>) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let store = CorpusStore::open_with(&config.store, StoreOptions::default())?;
        let root = config.store.clone();

        let results_dir = root.join(RESULTS_DIR);
        std::fs::create_dir_all(&results_dir).map_err(|e| state_error(&results_dir, e))?;
        let mut results = HashMap::new();
        for entry in std::fs::read_dir(&results_dir).map_err(|e| state_error(&results_dir, e))? {
            let path = entry.map_err(|e| state_error(&results_dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path).map_err(|e| state_error(&path, e))?;
                let set: ResultSet = serde_json::from_str(&text).map_err(|e| state_error(&path, e))?;
                results.insert(set.query.clone(), Arc::new(set));
            }
        }

        let mut reviews = ReviewLog::default();
        let review_path = root.join(REVIEWS_FILE);
        if review_path.exists() {
            let file = std::fs::File::open(&review_path).map_err(|e| state_error(&review_path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| state_error(&review_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(r) => reviews.push(r),
                    // a torn final line from a crash; later appends start fresh lines
                    Err(e) => tracing::warn!(error = %e, "skipping unreadable review record"),
                }
            }
        }

        let stories_path = root.join(STORIES_FILE);
        let stories = if stories_path.exists() {
            let text = std::fs::read_to_string(&stories_path).map_err(|e| state_error(&stories_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| state_error(&stories_path, e))?)
        } else {
            None
        };

        let cache = LabelCache::new(config.ocr.max_in_flight);
        store.warm_cache(&cache);
        let seq = results.keys().map(|k: &String| numeric_suffix(k)).max().unwrap_or(0);
        let (tx, rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared {
            token: config.token(),
            config,
            store: RwLock::new(store),
            cache,
            provider,
            seq: AtomicU64::new(seq),
            jobs: Mutex::new(BTreeMap::new()),
            queue: tx,
            results: RwLock::new(results),
            reviews: Mutex::new(reviews),
            stories: RwLock::new(stories),
            stats: Mutex::new(QueryStats::default()),
            idempotency: Mutex::new(HashMap::new()),
        });
        tokio::spawn(run_jobs(Arc::downgrade(&shared), rx));
        Ok(shared)
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:06}", self.seq.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub(crate) fn submit(&self, work: JobWork) -> Job {
        let id = self.next_id(match work.kind() {
            JobKind::Ingest => "ingest",
            JobKind::BatchQuery => "batch",
            JobKind::StoriesRebuild => "stories",
        });
        let job = Job {
            id: id.clone(),
            kind: work.kind(),
            status: JobStatus::Queued,
            submitted_at_ms: now_ms(),
            finished_at_ms: None,
            summary: None,
            error: None,
        };
        self.jobs.lock().insert(id.clone(), job.clone());
        if self.queue.send((id.clone(), work)).is_err() {
            self.finish(&id, Err(ApiError::internal("job worker stopped")));
        }
        job
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.jobs.lock().get(id).cloned()
    }

    fn finish(&self, id: &str, outcome: Result<serde_json::Value, ApiError>) {
        if let Some(job) = self.jobs.lock().get_mut(id) {
            job.finished_at_ms = Some(now_ms());
            match outcome {
                Ok(summary) => {
                    job.status = JobStatus::Succeeded;
                    job.summary = Some(summary);
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e);
                }
            }
        }
    }

    fn run(&self, id: &str, work: JobWork) -> Result<serde_json::Value, ApiError> {
        match work {
            JobWork::Ingest {
                entries,
                base,
                label,
                seed_set,
            } => to_value(&self.ingest(&entries, &base, label, seed_set.as_deref())?),
            JobWork::BatchQuery { seed_set, config } => {
                let set = self.batch_query(id, &seed_set, config)?;
                let accepted = set.candidates.iter().filter(|c| c.decision.is_accepted()).count();
                Ok(serde_json::json!({
                    "query": set.query,
                    "seed_set_version": set.seed_set_version,
                    "candidates": set.candidates.len(),
                    "accepted": accepted,
                    "ocr_calls_made": set.ocr_calls_made,
                }))
            }
            JobWork::StoriesRebuild { params, query } => {
                let snap = self.rebuild_stories(params, query)?;
                Ok(serde_json::json!({ "stories": snap.stories.len(), "eps": snap.eps }))
            }
        }
    }

    /// Ingests entries and, with `seed_set`, adds every ingested image to
    /// that set (created when missing) as an imported member.
    pub fn ingest(
        &self,
        entries: &[(usize, ManifestEntry)],
        base: &Path,
        label: bool,
        seed_set: Option<&str>,
    ) -> Result<IngestJobSummary, ApiError> {
        let mut total = IngestSummary::default();
        for chunk in entries.chunks(INGEST_CHUNK) {
            let s = self.store.write().ingest_entries(chunk, base)?;
            total.entries += s.entries;
            total.ingested += s.ingested;
            total.duplicates += s.duplicates;
            total.failed += s.failed;
            total.errors.extend(s.errors);
            total.image_ids.extend(s.image_ids);
        }
        let seed_set = match seed_set {
            Some(name) => {
                let mut store = self.store.write();
                let mut ids = total.image_ids.clone();
                ids.sort();
                ids.dedup();
                let set = match store.seed_set(name) {
                    None => store.create_seed_set(name, &ids)?,
                    Some(existing) => {
                        let fresh: Vec<String> = ids.into_iter().filter(|id| !existing.contains(id)).collect();
                        let mut set = existing.clone();
                        for id in fresh {
                            set = store.add_seed_member(name, &id, SeedProvenance::Imported, None)?;
                        }
                        set
                    }
                };
                Some(set)
            }
            None => None,
        };
        let labels = if label {
            let summary = self.store.write().label_missing(self.provider.as_ref())?;
            self.store.read().warm_cache(&self.cache);
            Some(summary)
        } else {
            None
        };
        Ok(IngestJobSummary {
            ingest: total,
            labels,
            seed_set,
        })
    }

    fn record_stats(&self, reports: &[&QueryReport]) {
        let mut s = self.stats.lock();
        for r in reports {
            let t = r.timings;
            s.queries += 1;
            s.total_ms += t.total_ms();
            s.max_ms = s.max_ms.max(t.total_ms());
            s.stages.hash_ms += t.hash_ms;
            s.stages.search_ms += t.search_ms;
            s.stages.ocr_ms += t.ocr_ms;
            s.stages.text_ms += t.text_ms;
        }
    }

    fn save_result(&self, set: ResultSet) -> Result<Arc<ResultSet>, ApiError> {
        let path = self.config.store.join(RESULTS_DIR).join(format!("{}.json", set.query));
        let bytes = serde_json::to_vec(&set).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&path, &bytes)?;
        let set = Arc::new(set);
        self.results.write().insert(set.query.clone(), set.clone());
        Ok(set)
    }

    /// Runs one seed, given by stored image id or uploaded bytes.
    pub fn query(
        &self,
        query_id: Option<String>,
        image_id: Option<&str>,
        upload: Option<Vec<u8>>,
        config: PipelineConfig,
    ) -> Result<(Arc<ResultSet>, QueryResult), ApiError> {
        config.validate().map_err(ApiError::from)?;
        let query_id = match query_id {
            Some(q) if q.trim().is_empty() => return Err(ApiError::validation("query_id is empty")),
            Some(q) if self.results.read().contains_key(&q) => {
                return Err(ApiError::validation(format!("query id {q:?} is already used")))
            }
            Some(q) => q,
            None => self.next_id("query"),
        };
        let store = self.store.read();
        let seed = match (image_id, upload) {
            (Some(id), None) => {
                let mut seed = store.seed_for(id, config.hash_kind)?;
                seed.query_id = query_id.clone();
                seed
            }
            (None, Some(bytes)) => Seed::upload(query_id.clone(), bytes),
            _ => return Err(ApiError::validation("give exactly one of image_id and image_base64")),
        };
        let pipeline = Pipeline {
            index: store.index(config.hash_kind),
            source: &*store,
            provider: self.provider.as_ref(),
            cache: &self.cache,
        };
        let result = pipeline.query(&seed, &config)?;
        drop(store);
        self.record_stats(&[&result.report]);
        let candidates = result
            .candidates
            .iter()
            .map(|c| BatchCandidate {
                image_id: c.image_id.clone(),
                decision: c.decision,
                distance: c.distance,
                text_similarity: c.text_similarity,
                provenance: vec![Provenance {
                    query_id: c.query_id.clone(),
                    distance: c.distance,
                    text_similarity: c.text_similarity,
                    decision: c.decision,
                }],
            })
            .collect();
        let set = self.save_result(ResultSet {
            query: query_id.clone(),
            seed_set: None,
            seed_set_version: None,
            config,
            candidates,
            seeds: vec![SeedOutcome {
                query_id,
                report: Some(result.report.clone()),
                error: None,
            }],
            ocr_calls_made: result.report.ocr_calls_made,
            created_at_ms: now_ms(),
        })?;
        Ok((set, result))
    }

    pub fn batch_query(&self, query: &str, seed_set: &str, config: PipelineConfig) -> Result<Arc<ResultSet>, ApiError> {
        config.validate().map_err(ApiError::from)?;
        let store = self.store.read();
        let version = store
            .seed_set(seed_set)
            .ok_or_else(|| ApiError::not_found("seed set", seed_set))?
            .version;
        let seeds = store.seeds(seed_set, config.hash_kind)?;
        let pipeline = Pipeline {
            index: store.index(config.hash_kind),
            source: &*store,
            provider: self.provider.as_ref(),
            cache: &self.cache,
        };
        let batch = pipeline.batch_query(&seeds, &config)?;
        drop(store);
        self.record_stats(&batch.seeds.iter().filter_map(|s| s.report.as_ref()).collect::<Vec<_>>());
        self.save_result(ResultSet {
            query: query.to_string(),
            seed_set: Some(seed_set.to_string()),
            seed_set_version: Some(version),
            config,
            candidates: batch.candidates,
            seeds: batch.seeds,
            ocr_calls_made: batch.ocr_calls_made,
            created_at_ms: now_ms(),
        })
    }

    pub fn result(&self, query: &str) -> Option<Arc<ResultSet>> {
        self.results.read().get(query).cloned()
    }

    pub fn latest_review(&self, query_id: &str, image_id: &str) -> Option<ReviewRecord> {
        self.reviews.lock().latest(query_id, image_id).cloned()
    }

    /// Records a verdict; an approval may also promote the image into a
    /// seed set.
    #[allow(clippy::too_many_arguments)]
    pub fn review(
        &self,
        query_id: &str,
        image_id: &str,
        verdict: Verdict,
        reviewer: &str,
        note: Option<String>,
        timestamp_ms: Option<u64>,
        promote: Option<(Option<String>, Option<u64>)>,
    ) -> Result<(ReviewRecord, Option<SeedSet>), ApiError> {
        if reviewer.trim().is_empty() {
            return Err(ApiError::validation("reviewer is empty"));
        }
        let result = self.result(query_id).ok_or_else(|| ApiError::not_found("query", query_id))?;
        if !result.candidates.iter().any(|c| c.image_id == image_id) {
            return Err(ApiError::not_found("candidate", image_id)
                .with_details(serde_json::json!({ "query_id": query_id, "image_id": image_id })));
        }
        let seed_set = match promote {
            None => None,
            Some(_) if verdict != Verdict::Approve => {
                return Err(ApiError::validation("only an approval can promote to a seed set"))
            }
            Some((name, expected)) => {
                let name = name
                    .or_else(|| result.seed_set.clone())
                    .ok_or_else(|| ApiError::validation("seed_set is required for a single-image query"))?;
                Some(self.store.write().promote_to_seed(&name, image_id, reviewer, expected)?)
            }
        };
        let mut log = self.reviews.lock();
        let record = ReviewRecord {
            seq: log.records.len() as u64 + 1,
            query_id: query_id.to_string(),
            image_id: image_id.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
            note,
            timestamp_ms: timestamp_ms.unwrap_or_else(now_ms),
            promoted: seed_set.as_ref().map(|s| Promotion {
                seed_set: s.name.clone(),
                version: s.version,
            }),
        };
        let path = self.config.store.join(REVIEWS_FILE);
        let mut line = serde_json::to_string(&record).map_err(|e| ApiError::internal(e.to_string()))?;
        line.push('\n');
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| {
                f.write_all(line.as_bytes())?;
                f.sync_data()
            })
            .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        log.push(record.clone());
        Ok((record, seed_set))
    }

    pub fn rebuild_stories(&self, params: ClusterParams, query: Option<String>) -> Result<StorySnapshot, ApiError> {
        let hashes: Vec<(String, pixelmod::hashing::PerceptualHash)> = {
            let store = self.store.read();
            let ids: Vec<String> = match &query {
                Some(q) => self
                    .result(q)
                    .ok_or_else(|| ApiError::not_found("query", q))?
                    .candidates
                    .iter()
                    .filter(|c| c.decision.is_accepted())
                    .map(|c| c.image_id.clone())
                    .collect(),
                None => store.records().map(|r| r.image_id.clone()).collect(),
            };
            ids.into_iter()
                .filter_map(|id| {
                    let h = store.get(&id)?.hash(HashKind::Pdq256);
                    Some((id, h))
                })
                .collect()
        };
        let stories = cluster(&hashes, &params)?;
        let snap = StorySnapshot {
            eps: params.eps,
            min_cluster_size: params.min_cluster_size,
            query,
            built_at_ms: now_ms(),
            stories,
        };
        let bytes = serde_json::to_vec(&snap).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&self.config.store.join(STORIES_FILE), &bytes)?;
        *self.stories.write() = Some(snap.clone());
        Ok(snap)
    }

    /// The current stories with moderated counts from approvals so far.
    pub fn stories(&self) -> Option<StorySnapshot> {
        let mut snap = self.stories.read().clone()?;
        let log = self.reviews.lock();
        let approved = log.approved_images();
        let flags: HashMap<String, bool> = snap
            .stories
            .iter()
            .flat_map(|s| s.members.iter())
            .map(|id| (id.clone(), approved.contains(id.as_str())))
            .collect();
        apply_flags(&mut snap.stories, &flags).expect("flags cover every member");
        Some(snap)
    }

    pub fn with_store<R>(&self, f: impl FnOnce(&CorpusStore) -> R) -> R {
        f(&self.store.read())
    }

    pub fn metrics(&self) -> Metrics {
        let stats = self.stats.lock();
        let n = stats.queries.max(1) as f64;
        let cache = self.cache.stats();
        let lookups = cache.hits + cache.misses;
        let mut jobs = BTreeMap::new();
        for job in self.jobs.lock().values() {
            let key = serde_json::to_value(job.status).expect("status serializes");
            *jobs.entry(key.as_str().unwrap_or_default().to_string()).or_insert(0) += 1;
        }
        Metrics {
            images: self.store.read().len(),
            queries: stats.queries,
            query_ms_mean: if stats.queries == 0 { 0.0 } else { stats.total_ms / n },
            query_ms_max: stats.max_ms,
            stage_ms_mean: StageTimings {
                hash_ms: stats.stages.hash_ms / n,
                search_ms: stats.stages.search_ms / n,
                ocr_ms: stats.stages.ocr_ms / n,
                text_ms: stats.stages.text_ms / n,
            },
            ocr_cache: cache,
            ocr_cache_hit_rate: if lookups == 0 { 0.0 } else { cache.hits as f64 / lookups as f64 },
            reviews: self.reviews.lock().records.len(),
            jobs,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
}

/// Executes queued jobs one at a time.
async fn run_jobs(shared: Weak<Shared>, mut rx: mpsc::UnboundedReceiver<(String, JobWork)>) {
    while let Some((id, work)) = rx.recv().await {
        let Some(s) = shared.upgrade() else { break };
        if let Some(job) = s.jobs.lock().get_mut(&id) {
            job.status = JobStatus::Running;
        }
        let runner = s.clone();
        let job_id = id.clone();
        let outcome = tokio::task::spawn_blocking(move || runner.run(&job_id, work))
            .await
            .unwrap_or_else(|e| Err(ApiError::internal(format!("job panicked: {e}"))));
        if let Err(e) = &outcome {
            tracing::warn!(job = %id, error = %e, "job failed");
        }
        s.finish(&id, outcome);
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, ApiError> {
    serde_json::to_value(v).map_err(|e| ApiError::internal(e.to_string()))
}

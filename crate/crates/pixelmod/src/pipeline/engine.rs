use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{decide, Decision, ImageData, ModerationCandidate, PipelineConfig, PipelineError, QueryReport, StageTimings};
use crate::binary_index::{BinaryIndex, IndexError, SearchHit};
use crate::hashing::{hash_image, PerceptualHash};
use crate::ocr::{LabelCache, OcrError, OcrLabel, OcrProvider, OcrRequest};

/// Resolves indexed image ids to their bytes.
pub trait ImageSource: Send + Sync {
    fn load(&self, image_id: &str) -> Result<ImageData, String>;
}

/// A query image.
#[derive(Debug, Clone)]
pub struct Seed {
    pub query_id: String,
    pub image: ImageData,
    /// Set when the seed is itself an indexed record; that record is left
    /// out of its own results. Other copies of the same picture are not.
    pub corpus_id: Option<String>,
    /// Known hash of the seed; skips decoding when its kind matches.
    pub hash: Option<PerceptualHash>,
}

impl Seed {
    pub fn upload(query_id: impl Into<String>, bytes: Vec<u8>) -> Self {
        Seed {
            query_id: query_id.into(),
            image: ImageData { bytes, path: None },
            corpus_id: None,
            hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub candidates: Vec<ModerationCandidate>,
    pub report: QueryReport,
}

/// One seed's view of a batch candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_id: String,
    pub distance: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_similarity: Option<f64>,
    pub decision: Decision,
}

/// A matched image across all seeds of a batch. The headline fields come
/// from its best provenance entry by (decision, distance, query id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCandidate {
    pub image_id: String,
    pub decision: Decision,
    pub distance: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_similarity: Option<f64>,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<QueryReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub candidates: Vec<BatchCandidate>,
    pub seeds: Vec<SeedOutcome>,
    pub ocr_calls_made: usize,
}

impl BatchResult {
    pub fn accepted(&self) -> impl Iterator<Item = &BatchCandidate> {
        self.candidates.iter().filter(|c| c.decision.is_accepted())
    }
}

/// Everything a query reads. Holding `&BinaryIndex` for the duration of a
/// query is what a read lock on the index provides.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub index: &'a BinaryIndex,
    pub source: &'a dyn ImageSource,
    pub provider: &'a dyn OcrProvider,
    pub cache: &'a LabelCache,
}

type LabelOutcome = Result<(OcrLabel, bool), String>;

impl<'a> Pipeline<'a> {
    pub fn query(&self, seed: &Seed, config: &PipelineConfig) -> Result<QueryResult, PipelineError> {
        config.validate()?;
        if self.index.hash_kind() != config.hash_kind {
            return Err(IndexError::KindMismatch {
                expected: self.index.hash_kind(),
                actual: config.hash_kind,
            }
            .into());
        }
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let hash = match seed.hash {
            Some(h) if h.kind() == config.hash_kind => h,
            _ => hash_image(&seed.image.bytes, config.hash_kind)?,
        };
        timings.hash_ms = ms(t);

        let t = Instant::now();
        let mut hits = self.index.search_range(&hash, config.theta_visual)?;
        if let Some(own) = &seed.corpus_id {
            hits.retain(|h| &h.image_id != own);
        }
        timings.search_ms = ms(t);

        let mut report = QueryReport {
            query_id: seed.query_id.clone(),
            visual_match_count: hits.len(),
            accepted_count: 0,
            rejected_count: 0,
            visual_only_count: 0,
            errored_count: 0,
            ocr_calls_made: 0,
            seed_label_empty: false,
            timings,
        };
        if hits.is_empty() {
            return Ok(QueryResult {
                candidates: Vec::new(),
                report,
            });
        }

        let t = Instant::now();
        let request = OcrRequest {
            bytes: &seed.image.bytes,
            source: seed.image.path.as_deref(),
        };
        let (seed_label, seed_hit) = self.cache.get_or_extract(&hash, &request, self.provider)?;
        report.ocr_calls_made += usize::from(!seed_hit);
        report.seed_label_empty = seed_label.is_empty();
        let match_labels: Vec<Option<LabelOutcome>> = if seed_label.is_empty() {
            vec![None; hits.len()]
        } else {
            self.match_labels(&hits).into_iter().map(Some).collect()
        };
        report.timings.ocr_ms = ms(t);

        let t = Instant::now();
        let mut candidates = Vec::with_capacity(hits.len());
        for (hit, label) in hits.into_iter().zip(match_labels) {
            let (decision, sim, error) = match label {
                None => {
                    let (d, s) = decide(config, &seed_label, &OcrLabel::empty());
                    (d, s, None)
                }
                Some(Ok((label, was_hit))) => {
                    report.ocr_calls_made += usize::from(!was_hit);
                    let (d, s) = decide(config, &seed_label, &label);
                    (d, s, None)
                }
                Some(Err(e)) => {
                    report.ocr_calls_made += 1;
                    (Decision::Errored, None, Some(e))
                }
            };
            match decision {
                Decision::Accepted => report.accepted_count += 1,
                Decision::AcceptedVisualOnly => report.visual_only_count += 1,
                Decision::Errored => report.errored_count += 1,
                Decision::RejectedText | Decision::RejectedNoText => report.rejected_count += 1,
            }
            candidates.push(ModerationCandidate {
                image_id: hit.image_id,
                distance: hit.distance,
                text_similarity: sim,
                decision,
                query_id: seed.query_id.clone(),
                error,
            });
        }
        candidates.sort_by(ModerationCandidate::canonical_cmp);
        report.timings.text_ms = ms(t);
        Ok(QueryResult { candidates, report })
    }

    /// Labels for every hit, fanned out over up to the cache's in-flight
    /// bound. Failures are per hit; the error text is kept for review.
    fn match_labels(&self, hits: &[SearchHit]) -> Vec<LabelOutcome> {
        let workers = self.cache.max_in_flight().min(hits.len()).max(1);
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<LabelOutcome>> = vec![None; hits.len()];
        let done: Vec<Vec<(usize, LabelOutcome)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= hits.len() {
                                break out;
                            }
                            out.push((i, self.match_label(&hits[i].image_id)));
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("OCR worker panicked")).collect()
        });
        for (i, outcome) in done.into_iter().flatten() {
            slots[i] = Some(outcome);
        }
        slots.into_iter().map(|s| s.expect("every hit labelled")).collect()
    }

    fn match_label(&self, image_id: &str) -> LabelOutcome {
        let hash = self
            .index
            .get(image_id)
            .ok_or_else(|| format!("image {image_id:?} left the index during the query"))?;
        if let Some(label) = self.cache.lookup(&hash) {
            return Ok((label, true));
        }
        let data = self.source.load(image_id)?;
        let request = OcrRequest {
            bytes: &data.bytes,
            source: data.path.as_deref(),
        };
        self.cache
            .get_or_extract(&hash, &request, self.provider)
            .map_err(|e: OcrError| e.to_string())
    }

    /// Runs every seed and merges the results per image. A seed that fails
    /// is reported and skipped; the batch fails only when all seeds fail.
    pub fn batch_query(&self, seeds: &[Seed], config: &PipelineConfig) -> Result<BatchResult, PipelineError> {
        if seeds.is_empty() {
            return Err(PipelineError::EmptySeedSet);
        }
        config.validate()?;
        let mut outcomes = Vec::with_capacity(seeds.len());
        let mut failures = Vec::new();
        let mut merged: BTreeMap<String, Vec<Provenance>> = BTreeMap::new();
        let mut ocr_calls = 0;
        for seed in seeds {
            match self.query(seed, config) {
                Ok(result) => {
                    ocr_calls += result.report.ocr_calls_made;
                    for c in result.candidates {
                        merged.entry(c.image_id).or_default().push(Provenance {
                            query_id: c.query_id,
                            distance: c.distance,
                            text_similarity: c.text_similarity,
                            decision: c.decision,
                        });
                    }
                    outcomes.push(SeedOutcome {
                        query_id: seed.query_id.clone(),
                        report: Some(result.report),
                        error: None,
                    });
                }
                Err(e) => {
                    tracing::warn!(seed = %seed.query_id, error = %e, "seed query failed");
                    failures.push((seed.query_id.clone(), e.to_string()));
                    outcomes.push(SeedOutcome {
                        query_id: seed.query_id.clone(),
                        report: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        if failures.len() == seeds.len() {
            return Err(PipelineError::AllSeedsFailed(failures));
        }

        let mut candidates: Vec<BatchCandidate> = merged
            .into_iter()
            .map(|(image_id, mut provenance)| {
                provenance.sort_by(|a, b| a.query_id.cmp(&b.query_id));
                let best = provenance
                    .iter()
                    .min_by(|a, b| {
                        (a.decision, a.distance, &a.query_id).cmp(&(b.decision, b.distance, &b.query_id))
                    })
                    .expect("at least one provenance")
                    .clone();
                BatchCandidate {
                    image_id,
                    decision: best.decision,
                    distance: best.distance,
                    text_similarity: best.text_similarity,
                    provenance,
                }
            })
            .collect();
        candidates.sort_by(|a, b| {
            (a.decision, a.distance)
                .cmp(&(b.decision, b.distance))
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        Ok(BatchResult {
            candidates,
            seeds: outcomes,
            ocr_calls_made: ocr_calls,
        })
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

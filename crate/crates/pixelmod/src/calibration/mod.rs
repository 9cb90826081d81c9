//! Scoring pipeline configurations against labelled query/candidate pairs
//! and searching the configuration grid for the best F1.
//!
//! Counts are taken over ground-truth pairs only: a relevant pair that is
//! retrieved and accepted is a true positive, an accepted irrelevant pair a
//! false positive, and a relevant pair that is either missed visually or
//! rejected on text a false negative.

mod bench;
mod grid;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary_index::{BinaryIndex, IndexError};
use crate::hashing::{HashKind, PerceptualHash};
use crate::ocr::OcrLabel;
use crate::pipeline::{decide, PipelineConfig, PipelineError};

pub use bench::{bench, render_table, BenchReport, TimingSummary, BENCH_MIN_SAMPLE, BENCH_RUNS, REFERENCE_RUNTIMES};
pub use grid::{grid_search, write_grid_csv, write_grid_json, GridRow, GridSpec};
pub use synthetic::{synthetic_gt, PairCategory, PlantedPair, SyntheticGt, SyntheticGtSpec};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("ground truth references image {0:?}, which is not in the corpus")]
    MissingImage(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("corpus record {id:?}: {reason}")]
    BadRecord { id: String, reason: String },
    #[error("bench needs at least {min} images, got {got}")]
    SampleTooSmall { min: usize, got: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GtEntry {
    pub query_id: String,
    pub candidate_id: String,
    pub is_relevant: bool,
}

/// Labelled pairs with a free-form note on where the labels came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    entries: Vec<GtEntry>,
    pub provenance: String,
}

#[derive(Deserialize)]
struct GtRow {
    query_id: String,
    candidate_id: String,
    is_relevant: String,
}

impl GroundTruthSet {
    /// Pairs must be unique and the set must hold at least one positive and
    /// one negative.
    pub fn new(entries: Vec<GtEntry>, provenance: impl Into<String>) -> Result<Self, CalibrationError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.query_id == e.candidate_id {
                return Err(CalibrationError::InvalidGroundTruth(format!(
                    "{:?} is paired with itself",
                    e.query_id
                )));
            }
            if !seen.insert((e.query_id.as_str(), e.candidate_id.as_str())) {
                return Err(CalibrationError::InvalidGroundTruth(format!(
                    "duplicate pair ({:?}, {:?})",
                    e.query_id, e.candidate_id
                )));
            }
        }
        if !entries.iter().any(|e| e.is_relevant) || entries.iter().all(|e| e.is_relevant) {
            return Err(CalibrationError::InvalidGroundTruth(
                "needs at least one relevant and one irrelevant pair".into(),
            ));
        }
        Ok(GroundTruthSet {
            entries,
            provenance: provenance.into(),
        })
    }

    pub fn entries(&self) -> &[GtEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.is_relevant).count()
    }

    /// Entry indices grouped by query id, in id order.
    pub fn by_query(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.entry(e.query_id.as_str()).or_default().push(i);
        }
        out
    }

    /// Reads `query_id,candidate_id,is_relevant` with a header row.
    /// `is_relevant` accepts true/false, yes/no and 1/0.
    pub fn read_csv<R: Read>(input: R, provenance: impl Into<String>) -> Result<Self, CalibrationError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<GtRow>().enumerate() {
            let row = row?;
            let is_relevant = match row.is_relevant.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => {
                    return Err(CalibrationError::InvalidGroundTruth(format!(
                        "row {}: is_relevant {other:?} is not a boolean",
                        line + 2
                    )))
                }
            };
            entries.push(GtEntry {
                query_id: row.query_id,
                candidate_id: row.candidate_id,
                is_relevant,
            });
        }
        Self::new(entries, provenance)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CalibrationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query_id", "candidate_id", "is_relevant"])?;
        for e in &self.entries {
            w.write_record([e.query_id.as_str(), e.candidate_id.as_str(), if e.is_relevant { "true" } else { "false" }])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Precision, recall and F1 with the counts they come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl EvalScores {
    /// Precision is 0 when nothing is accepted; F1 is 0 when P + R = 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalScores {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One corpus image as calibration sees it: both hashes and its OCR label.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub phash: PerceptualHash,
    pub pdq: PerceptualHash,
    pub label: OcrLabel,
}

impl EvalRecord {
    pub fn hash(&self, kind: HashKind) -> &PerceptualHash {
        match kind {
            HashKind::Phash64 => &self.phash,
            HashKind::Pdq256 => &self.pdq,
        }
    }
}

/// Labelled images indexed under both hash kinds.
pub struct EvalCorpus {
    records: HashMap<String, EvalRecord>,
    phash: BinaryIndex,
    pdq: BinaryIndex,
}

impl Default for EvalCorpus {
    fn default() -> Self {
        EvalCorpus {
            records: HashMap::new(),
            phash: BinaryIndex::flat(HashKind::Phash64),
            pdq: BinaryIndex::flat(HashKind::Pdq256),
        }
    }
}

impl EvalCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: EvalRecord) -> Result<(), CalibrationError> {
        let bad = |reason: &str| CalibrationError::BadRecord {
            id: record.id.clone(),
            reason: reason.into(),
        };
        if record.phash.kind() != HashKind::Phash64 || record.pdq.kind() != HashKind::Pdq256 {
            return Err(bad("hash kinds do not match their slots"));
        }
        if self.records.contains_key(&record.id) {
            return Err(bad("duplicate id"));
        }
        self.phash.insert(&record.id, &record.phash)?;
        self.pdq.insert(&record.id, &record.pdq)?;
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EvalRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index(&self, kind: HashKind) -> &BinaryIndex {
        match kind {
            HashKind::Phash64 => &self.phash,
            HashKind::Pdq256 => &self.pdq,
        }
    }

    fn require(&self, id: &str) -> Result<&EvalRecord, CalibrationError> {
        self.get(id).ok_or_else(|| CalibrationError::MissingImage(id.to_string()))
    }

    pub(crate) fn check_covers(&self, gt: &GroundTruthSet) -> Result<(), CalibrationError> {
        for e in gt.entries() {
            self.require(&e.query_id)?;
            self.require(&e.candidate_id)?;
        }
        Ok(())
    }
}

/// Scores one configuration: each GT query is searched at the config's
/// radius (leaving out the query's own record) and every retrieved GT
/// candidate is decided with the same rule queries use.
pub fn evaluate(config: &PipelineConfig, gt: &GroundTruthSet, corpus: &EvalCorpus) -> Result<EvalScores, CalibrationError> {
    config.validate()?;
    corpus.check_covers(gt)?;
    let index = corpus.index(config.hash_kind);
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (query_id, idxs) in gt.by_query() {
        let query = corpus.require(query_id)?;
        let retrieved: HashSet<String> = index
            .search_range(query.hash(config.hash_kind), config.theta_visual)?
            .into_iter()
            .filter(|h| h.image_id != query_id)
            .map(|h| h.image_id)
            .collect();
        for i in idxs {
            let e = &gt.entries()[i];
            let accepted = retrieved.contains(&e.candidate_id) && {
                let candidate = corpus.require(&e.candidate_id)?;
                decide(config, &query.label, &candidate.label).0.is_accepted()
            };
            match (e.is_relevant, accepted) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
    }
    Ok(EvalScores::from_counts(tp, fp, fn_, tn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::EmptyQueryPolicy;
    use crate::text_similarity::TextMetric;

    fn record(id: &str, phash: u64, pdq_flips: &[u32], text: &str) -> EvalRecord {
        let mut pdq = PerceptualHash::pdq([0; 4], 100);
        for &b in pdq_flips {
            pdq = pdq.with_flipped(b);
        }
        EvalRecord {
            id: id.into(),
            phash: PerceptualHash::phash(phash),
            pdq,
            label: OcrLabel::from_raw(text),
        }
    }

    fn entry(q: &str, c: &str, rel: bool) -> GtEntry {
        GtEntry {
            query_id: q.into(),
            candidate_id: c.into(),
            is_relevant: rel,
        }
    }

    fn small() -> (GroundTruthSet, EvalCorpus) {
        let mut corpus = EvalCorpus::new();
        corpus.insert(record("q", 0, &[], "stop the steal")).unwrap();
        corpus.insert(record("dup", 0, &[], "stop the steal")).unwrap();
        corpus.insert(record("near", 0b11, &[1, 2, 3], "STOP THE STEAL!")).unwrap();
        corpus.insert(record("twin", 0b1, &[7], "votes were counted")).unwrap();
        corpus.insert(record("far", u64::MAX, &(0..120).collect::<Vec<_>>(), "stop the steal")).unwrap();
        let gt = GroundTruthSet::new(
            vec![
                entry("q", "dup", true),
                entry("q", "near", true),
                entry("q", "twin", false),
                entry("q", "far", true),
            ],
            "hand made",
        )
        .unwrap();
        (gt, corpus)
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruthSet::new(vec![entry("a", "b", true)], "").is_err());
        assert!(GroundTruthSet::new(vec![entry("a", "b", true), entry("a", "b", false)], "").is_err());
        assert!(GroundTruthSet::new(vec![entry("a", "a", true), entry("a", "b", false)], "").is_err());
        assert!(GroundTruthSet::new(vec![entry("a", "b", true), entry("a", "c", false)], "").is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let text = "query_id,candidate_id,is_relevant\nq,a,true\nq,b,0\n r , c , YES \n";
        let gt = GroundTruthSet::read_csv(text.as_bytes(), "file").unwrap();
        assert_eq!(gt.entries()[2], entry("r", "c", true));
        assert_eq!(gt.positives(), 2);
        let mut out = Vec::new();
        gt.write_csv(&mut out).unwrap();
        assert_eq!(GroundTruthSet::read_csv(&out[..], "file").unwrap(), gt);
        let bad = "query_id,candidate_id,is_relevant\nq,a,maybe\nq,b,0\n";
        assert!(matches!(
            GroundTruthSet::read_csv(bad.as_bytes(), ""),
            Err(CalibrationError::InvalidGroundTruth(_))
        ));
    }

    #[test]
    fn scores_arithmetic() {
        let s = EvalScores::from_counts(8, 2, 4, 6);
        assert_eq!(s.precision, 0.8);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 * 0.8 * (2.0 / 3.0) / (0.8 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(s.total(), 20);
        let none = EvalScores::from_counts(0, 0, 5, 5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_counts_over_pairs() {
        let (gt, corpus) = small();
        let s = evaluate(&PipelineConfig::default(), &gt, &corpus).unwrap();
        // far is beyond 90 bits, twin fails on text
        assert_eq!((s.tp, s.fp, s.fn_, s.tn), (2, 0, 1, 1));

        let everything = PipelineConfig {
            theta_visual: 256,
            theta_textual: 0.0,
            ..Default::default()
        };
        let s = evaluate(&everything, &gt, &corpus).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 3.0 / 4.0);

        let exact = PipelineConfig {
            theta_visual: 0,
            ..Default::default()
        };
        let s = evaluate(&exact, &gt, &corpus).unwrap();
        assert_eq!((s.tp, s.fn_), (1, 2));
    }

    #[test]
    fn evaluate_is_repeatable_and_checks_coverage() {
        let (gt, corpus) = small();
        let c = PipelineConfig {
            hash_kind: HashKind::Phash64,
            theta_visual: 4,
            text_metric: TextMetric::JaroWinkler,
            theta_textual: 0.5,
            empty_query_policy: EmptyQueryPolicy::RejectAll,
            compare_raw_text: false,
        };
        assert_eq!(evaluate(&c, &gt, &corpus).unwrap(), evaluate(&c, &gt, &corpus).unwrap());
        let mut entries = gt.entries().to_vec();
        entries.push(entry("q", "ghost", false));
        let gt = GroundTruthSet::new(entries, "").unwrap();
        assert!(matches!(
            evaluate(&c, &gt, &corpus),
            Err(CalibrationError::MissingImage(id)) if id == "ghost"
        ));
    }
}

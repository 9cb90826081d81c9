//! Two-stage query: a Hamming range search finds visually similar images,
//! then OCR labels decide which of them share the seed's context.
//!
//! The per-match rule lives in [`decide`] so that calibration scores
//! configurations with exactly the logic queries use.

mod engine;
mod export;

use std::cmp::Ordering;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binary_index::IndexError;
use crate::hashing::{HashError, HashKind};
use crate::ocr::{OcrError, OcrLabel};
use crate::text_similarity::TextMetric;

pub use engine::{BatchCandidate, BatchResult, ImageSource, Pipeline, Provenance, QueryResult, Seed, SeedOutcome};
pub use export::{read_jsonl, write_jsonl, CANDIDATE_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("seed label: {0}")]
    Ocr(#[from] OcrError),
    #[error("image {id:?} unavailable: {reason}")]
    Source { id: String, reason: String },
    #[error("seed set is empty")]
    EmptySeedSet,
    #[error("all {} seeds failed; first error: {}", .0.len(), .0.first().map(|e| e.1.as_str()).unwrap_or(""))]
    AllSeedsFailed(Vec<(String, String)>),
    #[error("candidate export: {0}")]
    Export(String),
}

/// What to do with visual matches when the seed carries no text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmptyQueryPolicy {
    /// Keep every visual match, marked as visual-only evidence.
    #[default]
    AcceptVisualOnly,
    /// Reject every visual match.
    RejectAll,
}

/// Missing fields take their defaults when deserializing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub hash_kind: HashKind,
    /// Hamming radius of the visual stage.
    pub theta_visual: u32,
    pub text_metric: TextMetric,
    /// Minimum label similarity for acceptance.
    pub theta_textual: f64,
    pub empty_query_policy: EmptyQueryPolicy,
    /// Compare raw provider text instead of normalized text.
    pub compare_raw_text: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hash_kind: HashKind::Pdq256,
            theta_visual: 90,
            text_metric: TextMetric::JaccardNgram { n: 4 },
            theta_textual: 0.05,
            empty_query_policy: EmptyQueryPolicy::AcceptVisualOnly,
            compare_raw_text: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.theta_visual > self.hash_kind.bit_width() {
            return Err(PipelineError::InvalidConfig(format!(
                "theta_visual {} exceeds the {}-bit width of {}",
                self.theta_visual,
                self.hash_kind.bit_width(),
                self.hash_kind
            )));
        }
        if !(0.0..=1.0).contains(&self.theta_textual) {
            return Err(PipelineError::InvalidConfig(format!(
                "theta_textual {} is outside [0, 1]",
                self.theta_textual
            )));
        }
        if !self.text_metric.is_valid() {
            return Err(PipelineError::InvalidConfig(format!("unsupported metric {}", self.text_metric)));
        }
        Ok(())
    }
}

/// Outcome for one visual match, in canonical sort order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    /// Labels are similar enough.
    Accepted,
    /// Seed has no text; kept on visual evidence alone.
    AcceptedVisualOnly,
    /// The match's label could not be obtained; needs manual review.
    Errored,
    /// Labels differ: same picture, different context.
    RejectedText,
    /// Seed has no text and the policy rejects such matches.
    RejectedNoText,
}

impl Decision {
    pub fn is_accepted(self) -> bool {
        matches!(self, Decision::Accepted | Decision::AcceptedVisualOnly)
    }

    pub fn is_rejected(self) -> bool {
        matches!(self, Decision::RejectedText | Decision::RejectedNoText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModerationCandidate {
    pub image_id: String,
    pub distance: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_similarity: Option<f64>,
    pub decision: Decision,
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModerationCandidate {
    /// (decision, distance, id).
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.decision
            .cmp(&other.decision)
            .then(self.distance.cmp(&other.distance))
            .then_with(|| self.image_id.cmp(&other.image_id))
    }
}

/// Milliseconds spent in each stage of one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub hash_ms: f64,
    pub search_ms: f64,
    pub ocr_ms: f64,
    pub text_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.hash_ms + self.search_ms + self.ocr_ms + self.text_ms
    }
}

/// Per-query accounting. The four decision counts add up to
/// `visual_match_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub visual_match_count: usize,
    pub accepted_count: usize,
    pub rejected_count: usize,
    pub visual_only_count: usize,
    pub errored_count: usize,
    /// Provider invocations made by this query (cache misses).
    pub ocr_calls_made: usize,
    pub seed_label_empty: bool,
    pub timings: StageTimings,
}

/// Which text of a label is compared under `config`.
pub fn comparable_text<'a>(config: &PipelineConfig, label: &'a OcrLabel) -> &'a str {
    if config.compare_raw_text {
        &label.raw
    } else {
        &label.normalized
    }
}

/// Decides one visual match given both labels.
pub fn decide(config: &PipelineConfig, query: &OcrLabel, matched: &OcrLabel) -> (Decision, Option<f64>) {
    if query.is_empty() {
        return (decide_scored(config, None), None);
    }
    let sim = config
        .text_metric
        .similarity(comparable_text(config, query), comparable_text(config, matched));
    (decide_scored(config, Some(sim)), Some(sim))
}

/// The rule behind [`decide`] for an already computed similarity; `None`
/// means the seed label is empty.
pub fn decide_scored(config: &PipelineConfig, similarity: Option<f64>) -> Decision {
    match similarity {
        None => match config.empty_query_policy {
            EmptyQueryPolicy::AcceptVisualOnly => Decision::AcceptedVisualOnly,
            EmptyQueryPolicy::RejectAll => Decision::RejectedNoText,
        },
        Some(s) if s >= config.theta_textual => Decision::Accepted,
        Some(_) => Decision::RejectedText,
    }
}

/// An image's bytes and, when it lives on disk, its path.
#[derive(Debug, Clone)]
pub struct ImageData {
    pub bytes: Vec<u8>,
    pub path: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.hash_kind, HashKind::Pdq256);
        assert_eq!(c.theta_visual, 90);
        assert_eq!(c.text_metric, TextMetric::JaccardNgram { n: 4 });
        assert_eq!(c.theta_textual, 0.05);
        assert_eq!(c.empty_query_policy, EmptyQueryPolicy::AcceptVisualOnly);
        c.validate().unwrap();
    }

    #[test]
    fn validation() {
        let c = PipelineConfig {
            theta_visual: 65,
            hash_kind: HashKind::Phash64,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PipelineConfig {
            theta_textual: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PipelineConfig {
            text_metric: TextMetric::JaccardNgram { n: 9 },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_and_strictness() {
        let c = PipelineConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        let bad = json.replacen('{', "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<PipelineConfig>(&bad).is_err());
    }

    #[test]
    fn decision_rule() {
        let c = PipelineConfig::default();
        let seed = OcrLabel::from_raw("FRAUD. THE BIGGEST DISGRACE");
        let same = OcrLabel::from_raw("fraud.  the biggest   disgrace");
        let other = OcrLabel::from_raw("FOX NEWS PROJECTS BIDEN WIN");
        assert_eq!(decide(&c, &seed, &same), (Decision::Accepted, Some(1.0)));
        let (d, s) = decide(&c, &seed, &other);
        assert_eq!(d, Decision::RejectedText);
        assert!(s.unwrap() < 0.05);
        // match without text cannot reach a positive threshold
        assert_eq!(decide(&c, &seed, &OcrLabel::empty()), (Decision::RejectedText, Some(0.0)));
        assert_eq!(decide(&c, &OcrLabel::empty(), &other), (Decision::AcceptedVisualOnly, None));
        let strict = PipelineConfig {
            empty_query_policy: EmptyQueryPolicy::RejectAll,
            ..c
        };
        assert_eq!(decide(&strict, &OcrLabel::empty(), &other), (Decision::RejectedNoText, None));
        let raw = PipelineConfig {
            compare_raw_text: true,
            ..c
        };
        assert!(decide(&raw, &seed, &same).1.unwrap() < 1.0);
    }

    #[test]
    fn decision_order() {
        let mut v = vec![
            Decision::RejectedNoText,
            Decision::RejectedText,
            Decision::Errored,
            Decision::AcceptedVisualOnly,
            Decision::Accepted,
        ];
        v.sort();
        assert_eq!(v[0], Decision::Accepted);
        assert_eq!(v[4], Decision::RejectedNoText);
    }
}

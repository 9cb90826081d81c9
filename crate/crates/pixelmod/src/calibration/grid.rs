use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{CalibrationError, EvalCorpus, EvalScores, GroundTruthSet};
use crate::hashing::HashKind;
use crate::pipeline::{comparable_text, decide_scored, EmptyQueryPolicy, PipelineConfig};
use crate::text_similarity::TextMetric;

/// The configurations to score. The default is the standard grid: pHash
/// radii 4..=10, PDQ radii {32, 48, 64, 80, 90}, thresholds 0.00..=0.80 in
/// steps of 0.05, and every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub phash_radii: Vec<u32>,
    pub pdq_radii: Vec<u32>,
    pub thresholds: Vec<f64>,
    pub metrics: Vec<TextMetric>,
    #[serde(default)]
    pub empty_query_policy: EmptyQueryPolicy,
    #[serde(default)]
    pub compare_raw_text: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            phash_radii: (4..=10).collect(),
            pdq_radii: vec![32, 48, 64, 80, 90],
            thresholds: (0..=16).map(|i| f64::from(i * 5) / 100.0).collect(),
            metrics: TextMetric::all(),
            empty_query_policy: EmptyQueryPolicy::AcceptVisualOnly,
            compare_raw_text: false,
        }
    }
}

impl GridSpec {
    /// A grid holding exactly `config`.
    pub fn single(config: PipelineConfig) -> Self {
        let (phash_radii, pdq_radii) = match config.hash_kind {
            HashKind::Phash64 => (vec![config.theta_visual], vec![]),
            HashKind::Pdq256 => (vec![], vec![config.theta_visual]),
        };
        GridSpec {
            phash_radii,
            pdq_radii,
            thresholds: vec![config.theta_textual],
            metrics: vec![config.text_metric],
            empty_query_policy: config.empty_query_policy,
            compare_raw_text: config.compare_raw_text,
        }
    }

    fn radii(&self, kind: HashKind) -> &[u32] {
        match kind {
            HashKind::Phash64 => &self.phash_radii,
            HashKind::Pdq256 => &self.pdq_radii,
        }
    }

    /// Every configuration, ordered by hash kind, radius, metric, then
    /// threshold.
    pub fn configs(&self) -> Vec<PipelineConfig> {
        let mut out = Vec::with_capacity(self.len());
        for kind in [HashKind::Phash64, HashKind::Pdq256] {
            for &theta_visual in self.radii(kind) {
                for &text_metric in &self.metrics {
                    for &theta_textual in &self.thresholds {
                        out.push(PipelineConfig {
                            hash_kind: kind,
                            theta_visual,
                            text_metric,
                            theta_textual,
                            empty_query_policy: self.empty_query_policy,
                            compare_raw_text: self.compare_raw_text,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        (self.phash_radii.len() + self.pdq_radii.len()) * self.metrics.len() * self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.is_empty() {
            return Err(CalibrationError::InvalidGrid("grid has no configurations".into()));
        }
        for c in self.configs() {
            c.validate()
                .map_err(|e| CalibrationError::InvalidGrid(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: PipelineConfig,
    pub scores: EvalScores,
}

/// Scores every configuration of `spec`, best first by F1 then precision;
/// remaining ties keep grid order.
///
/// Each query is searched once per hash kind at that kind's largest radius.
/// Smaller radii filter those hits, and each pair's similarity is computed
/// once per metric, so the scores equal running [`super::evaluate`] per
/// configuration.
pub fn grid_search(spec: &GridSpec, gt: &GroundTruthSet, corpus: &EvalCorpus) -> Result<Vec<GridRow>, CalibrationError> {
    spec.validate()?;
    corpus.check_covers(gt)?;
    let entries = gt.entries();

    // Distance of each GT pair under each kind, if within that kind's max radius.
    let mut distances: HashMap<HashKind, Vec<Option<u32>>> = HashMap::new();
    for kind in [HashKind::Phash64, HashKind::Pdq256] {
        let Some(&max) = spec.radii(kind).iter().max() else {
            continue;
        };
        let index = corpus.index(kind);
        let mut per_pair = vec![None; entries.len()];
        for (query_id, idxs) in gt.by_query() {
            let query = corpus.get(query_id).expect("coverage checked");
            let hits: HashMap<String, u32> = index
                .search_range(query.hash(kind), max)?
                .into_iter()
                .filter(|h| h.image_id != query_id)
                .map(|h| (h.image_id, h.distance))
                .collect();
            for i in idxs {
                per_pair[i] = hits.get(&entries[i].candidate_id).copied();
            }
        }
        distances.insert(kind, per_pair);
    }

    // Similarity of each retrievable pair under each metric; the outer
    // `None` marks pairs no configuration can retrieve, the inner `None` an
    // empty query label.
    let retrievable: Vec<bool> = (0..entries.len())
        .map(|i| distances.values().any(|d| d[i].is_some()))
        .collect();
    let similarities: HashMap<TextMetric, Vec<Option<Option<f64>>>> = spec
        .metrics
        .iter()
        .map(|&metric| {
            let probe = PipelineConfig {
                text_metric: metric,
                compare_raw_text: spec.compare_raw_text,
                ..Default::default()
            };
            let sims = entries
                .iter()
                .zip(&retrievable)
                .map(|(e, &r)| {
                    r.then(|| {
                        let q = corpus.get(&e.query_id).expect("coverage checked");
                        let c = corpus.get(&e.candidate_id).expect("coverage checked");
                        (!q.label.is_empty())
                            .then(|| metric.similarity(comparable_text(&probe, &q.label), comparable_text(&probe, &c.label)))
                    })
                })
                .collect();
            (metric, sims)
        })
        .collect();

    let configs = spec.configs();
    let score = |config: &PipelineConfig| {
        let dists = &distances[&config.hash_kind];
        let sims = &similarities[&config.text_metric];
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (i, e) in entries.iter().enumerate() {
            let accepted = match (dists[i], sims[i]) {
                (Some(d), Some(sim)) if d <= config.theta_visual => decide_scored(config, sim).is_accepted(),
                _ => false,
            };
            match (e.is_relevant, accepted) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        EvalScores::from_counts(tp, fp, fn_, tn)
    };

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len());
    let chunk = configs.len().div_ceil(workers);
    let scores: Vec<EvalScores> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(score).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("grid worker panicked"))
            .collect()
    });

    let mut rows: Vec<GridRow> = configs
        .into_iter()
        .zip(scores)
        .map(|(config, scores)| GridRow { config, scores })
        .collect();
    rows.sort_by(|a, b| {
        b.scores
            .f1
            .total_cmp(&a.scores.f1)
            .then(b.scores.precision.total_cmp(&a.scores.precision))
    });
    Ok(rows)
}

/// One row per configuration with its scores and counts.
pub fn write_grid_csv<W: Write>(out: W, rows: &[GridRow]) -> Result<(), CalibrationError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "hash_kind",
        "theta_visual",
        "text_metric",
        "theta_textual",
        "empty_query_policy",
        "compare_raw_text",
        "precision",
        "recall",
        "f1",
        "tp",
        "fp",
        "fn",
        "tn",
    ])?;
    for (rank, r) in rows.iter().enumerate() {
        let c = &r.config;
        let s = &r.scores;
        let policy = serde_json::to_value(c.empty_query_policy)?;
        w.write_record([
            (rank + 1).to_string(),
            c.hash_kind.to_string(),
            c.theta_visual.to_string(),
            c.text_metric.to_string(),
            format!("{:.2}", c.theta_textual),
            policy.as_str().unwrap_or_default().to_string(),
            c.compare_raw_text.to_string(),
            format!("{:.6}", s.precision),
            format!("{:.6}", s.recall),
            format!("{:.6}", s.f1),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
            s.tn.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The rows as a JSON array with full configurations.
pub fn write_grid_json<W: Write>(out: W, rows: &[GridRow]) -> Result<(), CalibrationError> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

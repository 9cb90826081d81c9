//! A seeded ground truth whose best configuration is known in advance:
//! PDQ at radius 90 with Jaccard-4 at threshold 0.05, and nothing else.
//!
//! Hashes are planted directly by flipping an exact number of bits, and
//! labels are built from each query's text:
//!
//! | category | relevant | pHash bits | PDQ bits | label |
//! |---|---|---|---|---|
//! | exact | yes | 0 | 0 | query text, different casing and spacing |
//! | near | yes | 1..=3 | 1..=30 | as exact |
//! | far | yes | 11..=20 | 81..=90 | isolated query 4-grams between digit runs; J4 in [0.05, 0.10), J5 = 0 |
//! | substituted twin | no | 1..=4 | 20..=60 | every fourth character replaced by `#`; J4 = 0 |
//! | trigram twin | no | 1..=4 | 20..=60 | query trigrams joined by `#`; J4 = 0 |
//! | unrelated twin | no | 1..=4 | 20..=60 | Greek text at least as long as the query; J4 = 0 |
//! | distractor | no | 12..=24 | 100..=120 | query text |
//!
//! Far pairs sink every pHash radius up to 10 and every PDQ radius below 81.
//! Far labels pass Jaccard-4 at 0.05 but not at 0.10, and every twin is
//! accepted at threshold 0. For each other metric the generator checks that
//! some twin scores at least as high as the weakest far label, so no
//! threshold separates them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalCorpus, EvalRecord, EvalScores, GroundTruthSet, GtEntry};
use crate::hashing::{HashKind, PerceptualHash};
use crate::ocr::{normalize, OcrLabel};
use crate::pipeline::PipelineConfig;
use crate::text_similarity::TextMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGtSpec {
    pub seed: u64,
    pub queries: usize,
    pub exact_per_query: usize,
    pub near_per_query: usize,
    pub far_per_query: usize,
    pub distractors_per_query: usize,
}

impl Default for SyntheticGtSpec {
    fn default() -> Self {
        SyntheticGtSpec {
            seed: 7,
            queries: 24,
            exact_per_query: 1,
            near_per_query: 3,
            far_per_query: 2,
            distractors_per_query: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCategory {
    Exact,
    Near,
    Far,
    SubstitutedTwin,
    TrigramTwin,
    UnrelatedTwin,
    Distractor,
}

impl PairCategory {
    pub fn is_relevant(self) -> bool {
        matches!(self, PairCategory::Exact | PairCategory::Near | PairCategory::Far)
    }

    fn bit_ranges(self) -> ((u32, u32), (u32, u32)) {
        match self {
            PairCategory::Exact => ((0, 0), (0, 0)),
            PairCategory::Near => ((1, 3), (1, 30)),
            PairCategory::Far => ((11, 20), (81, 90)),
            PairCategory::SubstitutedTwin | PairCategory::TrigramTwin | PairCategory::UnrelatedTwin => ((1, 4), (20, 60)),
            PairCategory::Distractor => ((12, 24), (100, 120)),
        }
    }

    /// Planted Jaccard similarity to the query label as `[lo, hi)`, with
    /// `hi = None` meaning the point value `lo`.
    fn jaccard_band(self, n: u8) -> Option<(f64, Option<f64>)> {
        match (self, n) {
            (PairCategory::Exact | PairCategory::Near | PairCategory::Distractor, _) => Some((1.0, None)),
            (PairCategory::Far, 4) => Some((0.05, Some(0.10))),
            (PairCategory::Far, 5) => Some((0.0, None)),
            (PairCategory::SubstitutedTwin | PairCategory::TrigramTwin | PairCategory::UnrelatedTwin, 4 | 5) => {
                Some((0.0, None))
            }
            _ => None,
        }
    }
}

/// A generated pair with its exact planted distances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub query_id: String,
    pub candidate_id: String,
    pub category: PairCategory,
    pub phash_distance: u32,
    pub pdq_distance: u32,
}

impl PlantedPair {
    pub fn distance(&self, kind: HashKind) -> u32 {
        match kind {
            HashKind::Phash64 => self.phash_distance,
            HashKind::Pdq256 => self.pdq_distance,
        }
    }
}

pub struct SyntheticGt {
    pub spec: SyntheticGtSpec,
    pub gt: GroundTruthSet,
    pub corpus: EvalCorpus,
    pub pairs: Vec<PlantedPair>,
}

impl SyntheticGt {
    /// Scores `config` must get, worked out from planted distances and
    /// category bands alone. `None` when the bands do not settle every
    /// pair: metrics other than Jaccard-4/5, raw-text comparison, or a
    /// threshold inside the far band.
    pub fn expected_scores(&self, config: &PipelineConfig) -> Option<EvalScores> {
        let TextMetric::JaccardNgram { n } = config.text_metric else {
            return None;
        };
        if config.compare_raw_text {
            return None;
        }
        let t = config.theta_textual;
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for p in &self.pairs {
            let (lo, hi) = p.category.jaccard_band(n)?;
            let text_ok = match hi {
                None => t <= lo,
                Some(_) if t <= lo => true,
                Some(hi) if t >= hi => false,
                Some(_) => return None,
            };
            let accepted = p.distance(config.hash_kind) <= config.theta_visual && text_ok;
            match (p.category.is_relevant(), accepted) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        Some(EvalScores::from_counts(tp, fp, fn_, tn))
    }

    pub fn pairs_of(&self, category: PairCategory) -> impl Iterator<Item = &PlantedPair> {
        self.pairs.iter().filter(move |p| p.category == category)
    }
}

const WORD_LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const GREEK: &str = "αβγδεζηθικλμνξοπρστυφχψω";

fn query_text(rng: &mut ChaCha8Rng) -> String {
    let target = rng.random_range(50..=70);
    let mut out = String::new();
    while out.len() < target {
        if !out.is_empty() {
            out.push(' ');
        }
        for _ in 0..rng.random_range(3..=8) {
            out.push(WORD_LETTERS[rng.random_range(0..WORD_LETTERS.len())] as char);
        }
    }
    out
}

/// Uppercase with doubled spaces: a different raw string with the same
/// normalized text.
fn restyle(text: &str) -> String {
    text.to_uppercase().replace(' ', "  ")
}

fn far_label(rng: &mut ChaCha8Rng, query: &str) -> String {
    let chars: Vec<char> = query.chars().collect();
    loop {
        let k = rng.random_range(3..=8);
        // k disjoint 4-char windows, in text order
        let slots = (chars.len() / 4).max(1);
        let mut picks: Vec<usize> = sample(rng, slots, k.min(slots)).into_vec();
        picks.sort_unstable();
        let mut label = String::new();
        for (i, slot) in picks.iter().enumerate() {
            if i > 0 || rng.random_bool(0.5) {
                for _ in 0..rng.random_range(1..=3) {
                    label.push(char::from(b'0' + rng.random_range(0..10u8)));
                }
            }
            label.extend(&chars[slot * 4..slot * 4 + 4]);
        }
        let label = normalize(&label);
        let j4 = TextMetric::JaccardNgram { n: 4 }.similarity(query, &label);
        if (0.05..0.10).contains(&j4) {
            return label;
        }
    }
}

fn substituted(query: &str) -> String {
    query
        .chars()
        .enumerate()
        .map(|(i, c)| if i % 4 == 3 { '#' } else { c })
        .collect()
}

fn trigram_joined(query: &str) -> String {
    let chars: Vec<char> = query.chars().collect();
    chars
        .windows(3)
        .map(|w| w.iter().collect::<String>())
        .collect::<Vec<_>>()
        .join("#")
}

fn unrelated(rng: &mut ChaCha8Rng, min_chars: usize) -> String {
    let greek: Vec<char> = GREEK.chars().collect();
    let mut out = String::new();
    while out.chars().count() < min_chars + 5 {
        if !out.is_empty() {
            out.push(' ');
        }
        for _ in 0..rng.random_range(3..=8) {
            out.push(greek[rng.random_range(0..greek.len())]);
        }
    }
    out
}

fn flipped(rng: &mut ChaCha8Rng, base: &PerceptualHash, bits: u32) -> PerceptualHash {
    sample(rng, base.bit_width() as usize, bits as usize)
        .into_iter()
        .fold(*base, |h, b| h.with_flipped(b as u32))
}

/// Every metric other than Jaccard-4 must be unable to split this query's
/// far labels from its twins.
fn twins_block_other_metrics(query: &str, far: &[String], twins: &[String]) -> bool {
    TextMetric::all()
        .into_iter()
        .filter(|m| *m != TextMetric::JaccardNgram { n: 4 })
        .all(|m| {
            let weakest_far = far.iter().map(|f| m.similarity(query, f)).fold(f64::INFINITY, f64::min);
            let strongest_twin = twins.iter().map(|t| m.similarity(query, t)).fold(f64::NEG_INFINITY, f64::max);
            strongest_twin >= weakest_far
        })
}

pub fn synthetic_gt(spec: &SyntheticGtSpec) -> SyntheticGt {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = EvalCorpus::new();
    let mut entries = Vec::new();
    let mut pairs = Vec::new();

    for q in 0..spec.queries {
        let (text, far, twins) = loop {
            let text = query_text(&mut rng);
            let far: Vec<String> = (0..spec.far_per_query).map(|_| far_label(&mut rng, &text)).collect();
            let twins = vec![
                substituted(&text),
                trigram_joined(&text),
                unrelated(&mut rng, text.chars().count()),
            ];
            if twins_block_other_metrics(&text, &far, &twins) {
                break (text, far, twins);
            }
        };
        let query_id = format!("q-{q:03}");
        let phash = PerceptualHash::phash(rng.random());
        let pdq = PerceptualHash::pdq(rng.random(), 100);
        corpus
            .insert(EvalRecord {
                id: query_id.clone(),
                phash,
                pdq,
                label: OcrLabel::from_raw(restyle(&text)),
            })
            .expect("fresh id");

        let mut plan: Vec<(PairCategory, String, String)> = Vec::new();
        for i in 0..spec.exact_per_query {
            plan.push((PairCategory::Exact, format!("exact-{i}"), restyle(&text)));
        }
        for i in 0..spec.near_per_query {
            plan.push((PairCategory::Near, format!("near-{i}"), restyle(&text)));
        }
        for (i, label) in far.into_iter().enumerate() {
            plan.push((PairCategory::Far, format!("far-{i}"), label));
        }
        let twin_kinds = [PairCategory::SubstitutedTwin, PairCategory::TrigramTwin, PairCategory::UnrelatedTwin];
        for (i, (cat, label)) in twin_kinds.into_iter().zip(twins).enumerate() {
            plan.push((cat, format!("twin-{i}"), label));
        }
        for i in 0..spec.distractors_per_query {
            plan.push((PairCategory::Distractor, format!("distractor-{i}"), text.clone()));
        }

        for (category, suffix, label) in plan {
            let ((plo, phi), (dlo, dhi)) = category.bit_ranges();
            let phash_distance = rng.random_range(plo..=phi);
            let pdq_distance = rng.random_range(dlo..=dhi);
            let candidate_id = format!("{query_id}-{suffix}");
            corpus
                .insert(EvalRecord {
                    id: candidate_id.clone(),
                    phash: flipped(&mut rng, &phash, phash_distance),
                    pdq: flipped(&mut rng, &pdq, pdq_distance),
                    label: OcrLabel::from_raw(label),
                })
                .expect("fresh id");
            entries.push(GtEntry {
                query_id: query_id.clone(),
                candidate_id: candidate_id.clone(),
                is_relevant: category.is_relevant(),
            });
            pairs.push(PlantedPair {
                query_id: query_id.clone(),
                candidate_id,
                category,
                phash_distance,
                pdq_distance,
            });
        }
    }

    let provenance = format!(
        "synthetic: seed {}, {} queries, per query {} exact / {} near / {} far / 3 twins / {} distractors",
        spec.seed,
        spec.queries,
        spec.exact_per_query,
        spec.near_per_query,
        spec.far_per_query,
        spec.distractors_per_query
    );
    let gt = GroundTruthSet::new(entries, provenance).expect("planted set has both classes");
    SyntheticGt {
        spec: *spec,
        gt,
        corpus,
        pairs,
    }
}

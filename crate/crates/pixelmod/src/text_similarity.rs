//! String similarity between OCR labels.
//!
//! Four metrics are available, all character-based and all returning a
//! score in `[0, 1]`. Shared conventions:
//!
//! * both strings empty → `1.0`
//! * exactly one string empty → `0.0`
//!
//! `MetricLcs` keeps the distance-shaped definition `1 - |LCS| / max(|a|, |b|)`,
//! so unlike the other three it is *low* for near-identical strings.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Largest n-gram size accepted by [`TextMetric::jaccard`].
pub const MAX_NGRAM: u8 = 5;

const WINKLER_SCALING: f64 = 0.1;
const WINKLER_PREFIX_CAP: usize = 4;
/// The prefix boost only applies above this Jaro score.
const WINKLER_BOOST_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TextMetric {
    NormLevenshtein,
    JaroWinkler,
    MetricLcs,
    JaccardNgram { n: u8 },
}

impl TextMetric {
    /// Jaccard over character `n`-grams; `None` unless `1 <= n <= 5`.
    pub fn jaccard(n: u8) -> Option<Self> {
        (1..=MAX_NGRAM).contains(&n).then_some(TextMetric::JaccardNgram { n })
    }

    /// All metric variants explored by calibration: three fixed metrics
    /// plus Jaccard with n = 1..=5.
    pub fn all() -> Vec<TextMetric> {
        let mut out = vec![
            TextMetric::NormLevenshtein,
            TextMetric::JaroWinkler,
            TextMetric::MetricLcs,
        ];
        out.extend((1..=MAX_NGRAM).map(|n| TextMetric::JaccardNgram { n }));
        out
    }

    pub fn is_valid(&self) -> bool {
        match self {
            TextMetric::JaccardNgram { n } => (1..=MAX_NGRAM).contains(n),
            _ => true,
        }
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        similarity(*self, a, b)
    }
}

impl Default for TextMetric {
    fn default() -> Self {
        TextMetric::JaccardNgram { n: 4 }
    }
}

impl fmt::Display for TextMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextMetric::NormLevenshtein => f.write_str("norm_levenshtein"),
            TextMetric::JaroWinkler => f.write_str("jaro_winkler"),
            TextMetric::MetricLcs => f.write_str("metric_lcs"),
            TextMetric::JaccardNgram { n } => write!(f, "jaccard_{n}"),
        }
    }
}

impl FromStr for TextMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace('-', "_");
        match lower.as_str() {
            "norm_levenshtein" | "levenshtein" => Ok(TextMetric::NormLevenshtein),
            "jaro_winkler" => Ok(TextMetric::JaroWinkler),
            "metric_lcs" | "lcs" => Ok(TextMetric::MetricLcs),
            other => other
                .strip_prefix("jaccard_")
                .and_then(|n| n.parse::<u8>().ok())
                .and_then(TextMetric::jaccard)
                .ok_or_else(|| format!("unknown text metric {s:?}")),
        }
    }
}

/// Similarity of two already-normalized strings under `metric`.
pub fn similarity(metric: TextMetric, a: &str, b: &str) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len()) as f64;
    match metric {
        TextMetric::NormLevenshtein => 1.0 - levenshtein(&a, &b) as f64 / longest,
        TextMetric::JaroWinkler => jaro_winkler(&a, &b),
        TextMetric::MetricLcs => 1.0 - lcs_len(&a, &b) as f64 / longest,
        TextMetric::JaccardNgram { n } => jaccard_ngrams(&a, &b, n.max(1) as usize),
    }
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ca in a {
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub(crate) fn jaro(a: &[char], b: &[char]) -> f64 {
    // The greedy matching is order-sensitive, so fix an order to keep the
    // score symmetric.
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);
    let mut a_hit = vec![false; a.len()];
    let mut b_hit = vec![false; b.len()];
    let mut matches = 0usize;
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_hit[j] && b[j] == *ca {
                a_hit[i] = true;
                b_hit[j] = true;
                matches += 1;
                break;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let a_seq = a.iter().zip(&a_hit).filter(|(_, &h)| h).map(|(c, _)| c);
    let b_seq = b.iter().zip(&b_hit).filter(|(_, &h)| h).map(|(c, _)| c);
    // out-of-order matches, halved with integer division as in strcmp95
    let transpositions = a_seq.zip(b_seq).filter(|(x, y)| x != y).count() / 2;
    let m = matches as f64;
    let t = transpositions as f64;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

fn jaro_winkler(a: &[char], b: &[char]) -> f64 {
    let j = jaro(a, b);
    if j <= WINKLER_BOOST_THRESHOLD {
        return j;
    }
    let prefix = a
        .iter()
        .zip(b)
        .take(WINKLER_PREFIX_CAP)
        .take_while(|(x, y)| x == y)
        .count();
    j + prefix as f64 * WINKLER_SCALING * (1.0 - j)
}

fn ngrams(s: &[char], n: usize) -> HashSet<&[char]> {
    if s.len() < n {
        return std::iter::once(s).collect();
    }
    s.windows(n).collect()
}

fn jaccard_ngrams(a: &[char], b: &[char], n: usize) -> f64 {
    let ga = ngrams(a, n);
    let gb = ngrams(b, n);
    let inter = ga.intersection(&gb).count();
    let union = ga.len() + gb.len() - inter;
    inter as f64 / union as f64
}

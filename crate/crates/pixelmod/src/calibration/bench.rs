//! Per-image runtime of the two stages: hashing plus indexing, and OCR.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::binary_index::BinaryIndex;
use crate::hashing::{hash_image, HashKind};
use crate::ocr::{extract_label, OcrProvider, OcrRequest};
use crate::pipeline::{ImageData, PipelineConfig};

pub const BENCH_MIN_SAMPLE: usize = 30;
pub const BENCH_RUNS: usize = 5;

/// Reference seconds per image for the full OCR-refined pipeline and for
/// PDQ hashing alone, shown next to measured numbers.
pub const REFERENCE_RUNTIMES: [(&str, f64); 2] = [("hash + OCR pipeline", 0.223), ("PDQ hashing only", 0.020)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl TimingSummary {
    fn of(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_s = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        TimingSummary {
            mean_s: sorted.iter().sum::<f64>() / n as f64,
            median_s,
            p95_s: sorted[rank - 1],
            min_s: sorted[0],
            max_s: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub runs: usize,
    pub hash_kind: HashKind,
    pub provider: String,
    /// Mean seconds to hash one image and insert it into a fresh index.
    pub hash_index_mean_s: f64,
    /// Distribution of per-image OCR seconds, each averaged over the runs.
    pub ocr: TimingSummary,
    /// Pearson r between per-image OCR time and text coverage; absent when
    /// the provider reports no coverage or either series is constant.
    pub pearson_r: Option<f64>,
    pub ocr_failures: usize,
}

impl BenchReport {
    pub fn pearson_display(&self) -> String {
        self.pearson_r.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"))
    }
}

/// Times `runs` passes over `sample`. Images whose OCR fails are counted
/// and left out of the OCR statistics.
pub fn bench(
    config: &PipelineConfig,
    sample: &[ImageData],
    provider: &dyn OcrProvider,
    runs: usize,
) -> Result<BenchReport, CalibrationError> {
    if sample.len() < BENCH_MIN_SAMPLE {
        return Err(CalibrationError::SampleTooSmall {
            min: BENCH_MIN_SAMPLE,
            got: sample.len(),
        });
    }
    let runs = runs.max(1);

    let mut hash_total = 0.0;
    for _ in 0..runs {
        let mut index = BinaryIndex::flat(config.hash_kind);
        for (i, image) in sample.iter().enumerate() {
            let t = Instant::now();
            let hash = hash_image(&image.bytes, config.hash_kind).map_err(crate::pipeline::PipelineError::from)?;
            index.insert(&format!("bench-{i}"), &hash)?;
            hash_total += t.elapsed().as_secs_f64();
        }
    }

    let mut ocr_seconds = vec![0.0; sample.len()];
    let mut coverage: Vec<Option<f64>> = vec![None; sample.len()];
    let mut failed = vec![false; sample.len()];
    for _ in 0..runs {
        for (i, image) in sample.iter().enumerate() {
            let request = OcrRequest {
                bytes: &image.bytes,
                source: image.path.as_deref(),
            };
            let t = Instant::now();
            let result = extract_label(&request, provider);
            ocr_seconds[i] += t.elapsed().as_secs_f64();
            match result {
                Ok(label) => coverage[i] = coverage[i].or(label.coverage),
                Err(e) => {
                    tracing::warn!(image = i, error = %e, "bench OCR failed");
                    failed[i] = true;
                }
            }
        }
    }

    let ok: Vec<usize> = (0..sample.len()).filter(|&i| !failed[i]).collect();
    let per_image: Vec<f64> = ok.iter().map(|&i| ocr_seconds[i] / runs as f64).collect();
    let ocr = if per_image.is_empty() {
        TimingSummary::of(&[0.0])
    } else {
        TimingSummary::of(&per_image)
    };
    let covered: Option<Vec<f64>> = ok.iter().map(|&i| coverage[i]).collect();
    let pearson_r = covered.and_then(|c| pearson(&per_image, &c));

    Ok(BenchReport {
        images: sample.len(),
        runs,
        hash_kind: config.hash_kind,
        provider: provider.name().to_string(),
        hash_index_mean_s: hash_total / (runs * sample.len()) as f64,
        ocr,
        pearson_r,
        ocr_failures: failed.iter().filter(|f| **f).count(),
    })
}

/// `None` for fewer than two points or a constant series.
pub(crate) fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Plain-text report with the reference runtimes for comparison.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let total = report.hash_index_mean_s + report.ocr.mean_s;
    let _ = writeln!(
        out,
        "{} images x {} runs, {} hashing, provider {}",
        report.images, report.runs, report.hash_kind, report.provider
    );
    let _ = writeln!(out, "{:<28} {:>12}", "stage", "s/image");
    let _ = writeln!(out, "{:<28} {:>12.4}", "hash + index", report.hash_index_mean_s);
    let _ = writeln!(out, "{:<28} {:>12.4}", "OCR (mean)", report.ocr.mean_s);
    let _ = writeln!(
        out,
        "{:<28} {:>12}",
        "OCR (median / p95)",
        format!("{:.4} / {:.4}", report.ocr.median_s, report.ocr.p95_s)
    );
    let _ = writeln!(out, "{:<28} {:>12.4}", "total", total);
    if report.hash_index_mean_s > 0.0 {
        let _ = writeln!(out, "{:<28} {:>11.1}x", "total / hash", total / report.hash_index_mean_s);
    }
    let _ = writeln!(out, "{:<28} {:>12}", "pearson r (OCR vs coverage)", report.pearson_display());
    if report.ocr_failures > 0 {
        let _ = writeln!(out, "{:<28} {:>12}", "OCR failures", report.ocr_failures);
    }
    let _ = writeln!(out, "reference");
    for (name, secs) in REFERENCE_RUNTIMES {
        let _ = writeln!(out, "{name:<28} {secs:>12.3}");
    }
    let _ = writeln!(
        out,
        "{:<28} {:>11.1}x",
        "ratio",
        REFERENCE_RUNTIMES[0].1 / REFERENCE_RUNTIMES[1].1
    );
    out
}

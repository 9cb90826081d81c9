//! PDQ: 256-bit perceptual hash.
//!
//! Follows the published reference construction step for step, in `f32`,
//! because the order of float operations decides which coefficients fall
//! on either side of the median:
//!
//! 1. two passes of a separable box filter (a Jarosz tent approximation)
//!    whose window is sized from the input/output ratio,
//! 2. decimation to 64x64 by sampling cell centres,
//! 3. a gradient-energy quality score on the 64x64 buffer,
//! 4. a 16x16 DCT (rows/cols 1..=16 of the 64-point basis, no DC),
//! 5. bit `k` set iff coefficient `k` exceeds the Torben median.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{LuminancePlane, PerceptualHash, HASH_WORDS};

const BUFFER_DIM: usize = 64;
const DCT_DIM: usize = 16;
const JAROSZ_PASSES: usize = 2;

pub fn pdqhash256(plane: &LuminancePlane) -> PerceptualHash {
    let rows = plane.height() as usize;
    let cols = plane.width() as usize;
    let mut buf: Vec<f32> = plane.samples().iter().map(|&v| v as f32).collect();

    let window_along_rows = jarosz_window(cols, BUFFER_DIM);
    let window_along_cols = jarosz_window(rows, BUFFER_DIM);
    jarosz_filter(&mut buf, rows, cols, window_along_rows, window_along_cols, JAROSZ_PASSES);

    let small = decimate(&buf, rows, cols);
    let quality = quality_metric(&small);
    let coeffs = dct64_to_16(&small);
    let median = torben_median(&coeffs);

    let mut words = [0u64; HASH_WORDS];
    for (k, &c) in coeffs.iter().enumerate() {
        if c > median {
            words[k / 64] |= 1 << (k % 64);
        }
    }
    PerceptualHash::pdq(words, quality)
}

fn jarosz_window(old_dim: usize, new_dim: usize) -> usize {
    (old_dim + 2 * new_dim - 1) / (2 * new_dim)
}

fn jarosz_filter(
    buf: &mut [f32],
    rows: usize,
    cols: usize,
    window_along_rows: usize,
    window_along_cols: usize,
    passes: usize,
) {
    let mut tmp = vec![0.0f32; buf.len()];
    for _ in 0..passes {
        for r in 0..rows {
            box_1d(buf, r * cols, &mut tmp, cols, 1, window_along_rows);
        }
        for c in 0..cols {
            box_1d(&tmp, c, buf, rows, cols, window_along_cols);
        }
    }
}

/// Running-sum box filter over one strided lane. The window is centred,
/// shrinking near both edges.
fn box_1d(input: &[f32], start: usize, output: &mut [f32], len: usize, stride: usize, window: usize) {
    debug_assert!(window >= 1 && window <= len);
    let half = (window + 2) / 2;
    let lead = half - 1;
    let trail = window - half + 1;
    let at = |i: usize| start + i * stride;

    let mut sum = 0.0f32;
    let mut count = 0.0f32;
    for i in 0..lead {
        sum += input[at(i)];
        count += 1.0;
    }
    for i in lead..window {
        sum += input[at(i)];
        count += 1.0;
        output[at(i - lead)] = sum / count;
    }
    for i in window..len {
        let o = i - lead;
        sum += input[at(i)];
        sum -= input[at(o - trail)];
        output[at(o)] = sum / count;
    }
    for o in (len + 1 - half)..len {
        sum -= input[at(o - trail)];
        count -= 1.0;
        output[at(o)] = sum / count;
    }
}

fn decimate(buf: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; BUFFER_DIM * BUFFER_DIM];
    for i in 0..BUFFER_DIM {
        let src_i = ((2 * i + 1) * rows) / (2 * BUFFER_DIM);
        for j in 0..BUFFER_DIM {
            let src_j = ((2 * j + 1) * cols) / (2 * BUFFER_DIM);
            out[i * BUFFER_DIM + j] = buf[src_i * cols + src_j];
        }
    }
    out
}

/// Counts significant gradients; the constants are the reference's
/// hand-tuned values. Returns 0..=100.
fn quality_metric(b: &[f32]) -> u8 {
    let n = BUFFER_DIM;
    let step = |u: f32, v: f32| (((u - v) * 100.0) / 255.0) as i32;
    let mut total: i64 = 0;
    for i in 0..n - 1 {
        for j in 0..n {
            total += step(b[i * n + j], b[(i + 1) * n + j]).abs() as i64;
        }
    }
    for i in 0..n {
        for j in 0..n - 1 {
            total += step(b[i * n + j], b[i * n + j + 1]).abs() as i64;
        }
    }
    (total / 90).min(100) as u8
}

fn dct_matrix() -> &'static [f32] {
    static MATRIX: OnceLock<Vec<f32>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let scale = (2.0f64 / BUFFER_DIM as f64).sqrt();
        let mut m = vec![0.0f32; DCT_DIM * BUFFER_DIM];
        for i in 0..DCT_DIM {
            for j in 0..BUFFER_DIM {
                let angle = (PI / 2.0 / BUFFER_DIM as f64) * (i + 1) as f64 * (2 * j + 1) as f64;
                m[i * BUFFER_DIM + j] = (scale * angle.cos()) as f32;
            }
        }
        m
    })
}

/// `D * A * D^T` with `D` the 16x64 basis.
fn dct64_to_16(a: &[f32]) -> Vec<f32> {
    let d = dct_matrix();
    let n = BUFFER_DIM;
    let mut t = vec![0.0f32; DCT_DIM * n];
    for i in 0..DCT_DIM {
        for j in 0..n {
            let mut sum = 0.0f32;
            for k in 0..n {
                sum += d[i * n + k] * a[k * n + j];
            }
            t[i * n + j] = sum;
        }
    }
    let mut out = vec![0.0f32; DCT_DIM * DCT_DIM];
    for i in 0..DCT_DIM {
        for j in 0..DCT_DIM {
            let mut sum = 0.0f32;
            for k in 0..n {
                sum += t[i * n + k] * d[j * n + k];
            }
            out[i * DCT_DIM + j] = sum;
        }
    }
    out
}

/// Torben's selection-free median: bisects on value until the guess splits
/// the data, then returns the appropriate neighbouring element.
fn torben_median(m: &[f32]) -> f32 {
    let mut min = m.iter().copied().fold(f32::INFINITY, f32::min);
    let mut max = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let half = m.len().div_ceil(2);
    loop {
        let guess = (min + max) / 2.0;
        let (mut less, mut greater, mut equal) = (0usize, 0usize, 0usize);
        let mut max_lt = min;
        let mut min_gt = max;
        for &v in m {
            if v < guess {
                less += 1;
                if v > max_lt {
                    max_lt = v;
                }
            } else if v > guess {
                greater += 1;
                if v < min_gt {
                    min_gt = v;
                }
            } else {
                equal += 1;
            }
        }
        if less <= half && greater <= half {
            return if less >= half {
                max_lt
            } else if less + equal >= half {
                guess
            } else {
                min_gt
            };
        } else if less > greater {
            max = max_lt;
        } else {
            min = min_gt;
        }
    }
}

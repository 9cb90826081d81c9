use std::f64::consts::PI;

use super::{LuminancePlane, PerceptualHash};

const RESIZED: usize = 32;
const BLOCK: usize = 8;
/// Coefficients with smaller magnitude are treated as exactly zero, which
/// keeps flat images from hashing to float noise.
const ZERO_SNAP: f64 = 1e-6;

/// 64-bit DCT hash.
///
/// The plane is area-averaged down to 32x32, transformed with an
/// orthonormal 2-D DCT-II, and the 8x8 lowest-frequency block is kept in
/// row-major order. The DC slot is replaced by 0 so that overall brightness
/// never reaches the median. Bit `63 - i` is set iff coefficient `i` is
/// strictly greater than the median of the 64 block values (mean of the two
/// middle values).
pub fn phash64(plane: &LuminancePlane) -> PerceptualHash {
    let small = area_resize(plane, RESIZED, RESIZED);
    let mut block = dct_low_block(&small);
    block[0] = 0.0;
    for c in block.iter_mut() {
        if c.abs() < ZERO_SNAP {
            *c = 0.0;
        }
    }
    let mut sorted = block;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = (sorted[31] + sorted[32]) / 2.0;
    let bits = block
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > median)
        .fold(0u64, |acc, (i, _)| acc | 1 << (63 - i));
    PerceptualHash::phash(bits)
}

/// Overlap weights mapping `src` samples onto `dst` output cells. Each output
/// cell covers `[o * src/dst, (o+1) * src/dst)` and averages the source
/// samples by their overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .map(|s| (s, (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable box (area-average) resample to `out_w` x `out_h`.
pub(crate) fn area_resize(plane: &LuminancePlane, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (plane.width() as usize, plane.height() as usize);
    let xw = area_weights(w, out_w);
    let yw = area_weights(h, out_h);
    let src = plane.samples();

    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for (ox, taps) in xw.iter().enumerate() {
            rows[y * out_w + ox] = taps.iter().map(|&(s, wt)| line[s] as f64 * wt).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, taps) in yw.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(s, wt)| rows[s * out_w + ox] * wt).sum();
        }
    }
    out
}

fn dct_low_block(img: &[f64]) -> [f64; BLOCK * BLOCK] {
    let n = RESIZED;
    // basis[u][x] = alpha(u) * cos(pi * (2x + 1) * u / 2n)
    let basis: Vec<[f64; RESIZED]> = (0..BLOCK)
        .map(|u| {
            let alpha = if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            let mut row = [0.0; RESIZED];
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
            }
            row
        })
        .collect();

    // column pass: tmp[u][x] = sum_y basis[u][y] * img[y][x]
    let mut tmp = vec![[0.0; RESIZED]; BLOCK];
    for (u, b) in basis.iter().enumerate() {
        for y in 0..n {
            let row = &img[y * n..(y + 1) * n];
            for x in 0..n {
                tmp[u][x] += b[y] * row[x];
            }
        }
    }
    let mut out = [0.0; BLOCK * BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u * BLOCK + v] = (0..n).map(|x| tmp[u][x] * basis[v][x]).sum();
        }
    }
    out
}

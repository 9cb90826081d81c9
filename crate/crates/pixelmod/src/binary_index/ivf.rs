//! k-majority clustering: k-means in Hamming space where the centroid
//! update is a per-bit majority vote.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::IvfParams;
use crate::hashing::hamming_words;

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest_centroid(centroids: &[u64], stride: usize, q: &[u64]) -> u32 {
    let mut best = (u32::MAX, 0u32);
    for (i, c) in centroids.chunks(stride).enumerate() {
        let d = hamming_words(q, c);
        if d < best.0 {
            best = (d, i as u32);
        }
    }
    best.1
}

/// The `nprobe` nearest centroids, ordered by (distance, index).
pub(crate) fn probe_order(centroids: &[u64], stride: usize, q: &[u64], nprobe: usize) -> Vec<u32> {
    let mut ranked: Vec<(u32, u32)> = centroids
        .chunks(stride)
        .enumerate()
        .map(|(i, c)| (hamming_words(q, c), i as u32))
        .collect();
    ranked.sort_unstable();
    ranked.into_iter().take(nprobe).map(|(_, i)| i).collect()
}

/// Returns `nlist * stride` centroid words.
///
/// Seeding is k-means++ (squared-distance sampling) from a ChaCha8 stream
/// keyed by `params.seed`. A bit of a centroid is 1 when at least half of
/// the cluster's members have it set. Empty clusters keep their previous
/// centroid. Stops when assignments stop changing or after `max_iters`.
pub(crate) fn k_majority(words: &[u64], stride: usize, slots: &[u32], params: IvfParams) -> Vec<u64> {
    let nlist = params.nlist as usize;
    let member = |slot: u32| &words[slot as usize * stride..(slot as usize + 1) * stride];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut centroids: Vec<u64> = Vec::with_capacity(nlist * stride);
    let first = slots[rng.random_range(0..slots.len())];
    centroids.extend_from_slice(member(first));
    let mut nearest: Vec<u64> = slots
        .iter()
        .map(|&s| {
            let d = hamming_words(member(s), member(first)) as u64;
            d * d
        })
        .collect();
    for _ in 1..nlist {
        let total: u64 = nearest.iter().sum();
        let pick = if total == 0 {
            rng.random_range(0..slots.len())
        } else {
            let mut target = rng.random_range(0..total);
            let mut chosen = slots.len() - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = member(slots[pick]).to_vec();
        for (i, &s) in slots.iter().enumerate() {
            let d = hamming_words(member(s), &c) as u64;
            nearest[i] = nearest[i].min(d * d);
        }
        centroids.extend_from_slice(&c);
    }

    let bits = stride * 64;
    let mut assignment = vec![u32::MAX; slots.len()];
    for _ in 0..params.max_iters {
        let mut changed = false;
        for (i, &s) in slots.iter().enumerate() {
            let c = nearest_centroid(&centroids, stride, member(s));
            if c != assignment[i] {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut ones = vec![0u32; nlist * bits];
        let mut sizes = vec![0u32; nlist];
        for (i, &s) in slots.iter().enumerate() {
            let c = assignment[i] as usize;
            sizes[c] += 1;
            let counts = &mut ones[c * bits..(c + 1) * bits];
            for (w, &word) in member(s).iter().enumerate() {
                let mut rest = word;
                while rest != 0 {
                    let b = rest.trailing_zeros() as usize;
                    counts[w * 64 + b] += 1;
                    rest &= rest - 1;
                }
            }
        }
        for c in 0..nlist {
            if sizes[c] == 0 {
                continue;
            }
            let counts = &ones[c * bits..(c + 1) * bits];
            for w in 0..stride {
                let mut word = 0u64;
                for b in 0..64 {
                    if 2 * counts[w * 64 + b] >= sizes[c] {
                        word |= 1 << b;
                    }
                }
                centroids[c * stride + w] = word;
            }
        }
    }
    centroids
}

//! Reference implementations written independently of the library: plain
//! loops and full dynamic-programming tables, no shared helpers.

use std::collections::BTreeSet;

pub fn popcount_distance(a: &[u64; 4], b: &[u64; 4]) -> u32 {
    let mut d = 0;
    for i in 0..4 {
        let mut x = a[i] ^ b[i];
        while x != 0 {
            x &= x - 1;
            d += 1;
        }
    }
    d
}

/// Sorted `(distance, id)` of every record within `radius`.
pub fn brute_force_range(records: &[(String, [u64; 4])], q: &[u64; 4], radius: u32) -> Vec<(u32, String)> {
    let mut out: Vec<(u32, String)> = records
        .iter()
        .filter_map(|(id, w)| {
            let d = popcount_distance(w, q);
            (d <= radius).then(|| (d, id.clone()))
        })
        .collect();
    out.sort();
    out
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..=a.len() {
        d[i][0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn lcs(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            d[i][j] = if a[i - 1] == b[j - 1] {
                d[i - 1][j - 1] + 1
            } else {
                d[i - 1][j].max(d[i][j - 1])
            };
        }
    }
    d[a.len()][b.len()]
}

/// Character n-grams; a string shorter than `n` is its own single gram.
pub fn grams(s: &str, n: usize) -> BTreeSet<String> {
    let c: Vec<char> = s.chars().collect();
    if c.len() < n {
        return BTreeSet::from([s.to_string()]);
    }
    (0..=c.len() - n).map(|i| c[i..i + n].iter().collect()).collect()
}

pub fn jaccard(a: &str, b: &str, n: usize) -> f64 {
    let (x, y) = (grams(a, n), grams(b, n));
    x.intersection(&y).count() as f64 / x.union(&y).count() as f64
}

/// Connected components of the graph joining points within `eps`, as a
/// set of sorted member lists.
pub fn components(points: &[(String, [u64; 4])], eps: u32) -> BTreeSet<Vec<String>> {
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if popcount_distance(&points[i].1, &points[j].1) <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(points[i].0.clone());
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect()
}

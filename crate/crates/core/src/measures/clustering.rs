//! Clustering validity indices on labeled point sets, with the ground-truth
//! label as the cluster index.
//!
//! Points are rows of a flat `f64` buffer with `dim` columns.

use serde::{Deserialize, Serialize};

/// Centroid distances below this are treated as coincident.
pub const SEPARATION_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average of the pairwise ratios over competing clusters.
    Mean,
    /// Worst (largest) pairwise ratio, the classic index.
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexValue {
    pub value: f64,
    /// Pairwise terms dropped for coincident centroids.
    pub skipped_pairs: u64,
}

struct Clusters {
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
}

fn group(points: &[f64], dim: usize, labels: &[usize]) -> Clusters {
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut members = vec![Vec::new(); ids.len()];
    for (i, l) in labels.iter().enumerate() {
        members[ids.binary_search(l).unwrap()].push(i);
    }
    let centroids = members
        .iter()
        .map(|m| {
            let mut c = vec![0.0; dim];
            for &i in m {
                for (a, &v) in c.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                    *a += v;
                }
            }
            c.iter_mut().for_each(|a| *a /= m.len() as f64);
            c
        })
        .collect();
    Clusters {
        labels: ids,
        members,
        centroids,
    }
}

fn dist(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    } else {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// Davies-Bouldin index with scatter `S_i = (mean_n |x_n - mu_i|^p)^(1/p)`
/// (`|.|` the `p`-norm distance) and separation `M_ij = |mu_i - mu_j|_p`.
///
/// Returns `None` when every pairwise term is skipped.
pub fn davies_bouldin(points: &[f64], dim: usize, labels: &[usize], p: f64, agg: Aggregation) -> Option<IndexValue> {
    let cl = group(points, dim, labels);
    let scatter: Vec<f64> = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(m, mu)| {
            let s: f64 = m
                .iter()
                .map(|&i| dist(&points[i * dim..(i + 1) * dim], mu, p).powf(p))
                .sum();
            (s / m.len() as f64).powf(1.0 / p)
        })
        .collect();
    let k = cl.labels.len();
    let mut skipped = 0u64;
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..k {
        let mut acc: Option<f64> = None;
        let mut n = 0usize;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = dist(&cl.centroids[i], &cl.centroids[j], p);
            if m < SEPARATION_EPS {
                skipped += 1;
                continue;
            }
            let r = (scatter[i] + scatter[j]) / m;
            n += 1;
            acc = Some(match (agg, acc) {
                (_, None) => r,
                (Aggregation::Mean, Some(a)) => a + r,
                (Aggregation::Max, Some(a)) => a.max(r),
            });
        }
        if let Some(a) = acc {
            total += match agg {
                Aggregation::Mean => a / n as f64,
                Aggregation::Max => a,
            };
            counted += 1;
        }
    }
    (counted > 0).then(|| IndexValue {
        value: total / counted as f64,
        skipped_pairs: skipped,
    })
}

/// Mean silhouette coefficient (Euclidean). Samples of singleton clusters
/// score 0. Needs at least two clusters.
pub fn silhouette(points: &[f64], dim: usize, labels: &[usize]) -> Option<f64> {
    let cl = group(points, dim, labels);
    let k = cl.labels.len();
    if k < 2 {
        return None;
    }
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let ci = cl.labels.binary_search(&labels[i]).unwrap();
        if cl.members[ci].len() == 1 {
            continue;
        }
        let xi = &points[i * dim..(i + 1) * dim];
        let mut mean_to = vec![0.0; k];
        for (c, m) in cl.members.iter().enumerate() {
            let s: f64 = m.iter().map(|&j| dist(xi, &points[j * dim..(j + 1) * dim], 2.0)).sum();
            let denom = if c == ci { m.len() - 1 } else { m.len() };
            mean_to[c] = s / denom as f64;
        }
        let a = mean_to[ci];
        let b = (0..k)
            .filter(|&c| c != ci)
            .map(|c| mean_to[c])
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

/// Calinski-Harabasz variance ratio. Needs `2 <= clusters < samples`.
pub fn calinski_harabasz(points: &[f64], dim: usize, labels: &[usize]) -> Option<f64> {
    let cl = group(points, dim, labels);
    let k = cl.labels.len();
    let n = labels.len();
    if k < 2 || k >= n {
        return None;
    }
    let mut mean = vec![0.0; dim];
    for row in points.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let between: f64 = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(m, c)| m.len() as f64 * dist(c, &mean, 2.0).powi(2))
        .sum();
    let within: f64 = cl
        .members
        .iter()
        .zip(&cl.centroids)
        .map(|(m, c)| {
            m.iter()
                .map(|&i| dist(&points[i * dim..(i + 1) * dim], c, 2.0).powi(2))
                .sum::<f64>()
        })
        .sum();
    if within == 0.0 {
        return Some(if between == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Some(between * (n - k) as f64 / (within * (k - 1) as f64))
}

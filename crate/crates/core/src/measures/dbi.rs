//! Consistency of representations: clustering quality of layer-`k`
//! activations with the label as cluster id, averaged over minibatches.

use super::clustering::{self, SEPARATION_EPS};
use super::{capture_layer, MeasureError, MeasureValue};
use crate::data::Dataset;
use crate::model::ModelSpec;
use crate::nn;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use super::clustering::Aggregation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    /// Output of the first convolution's activation.
    First,
    /// Third layer from the end, not counting a trailing softmax.
    ThirdFromLast,
    Explicit(usize),
}

impl LayerSelector {
    pub fn resolve(self, model: &ModelSpec) -> usize {
        match self {
            LayerSelector::First => model.first_layer_index(),
            LayerSelector::ThirdFromLast => model.third_from_last_index(),
            LayerSelector::Explicit(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Spatial max-pooling, window 4 (clamped to the map), stride 1.
    MaxPool4,
    Pca {
        components: usize,
    },
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterIndexKind {
    DaviesBouldin,
    Silhouette,
    CalinskiHarabasz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbiConfig {
    pub layer: LayerSelector,
    pub reduction: Reduction,
    pub aggregation: Aggregation,
    pub index: ClusterIndexKind,
    /// Defaults to `min(N, 24 * classes)`.
    pub batch_size: Option<usize>,
    pub batches: usize,
    pub p: f64,
    pub seed: u64,
    pub retry_cap: usize,
}

impl Default for DbiConfig {
    fn default() -> Self {
        Self {
            layer: LayerSelector::First,
            reduction: Reduction::MaxPool4,
            aggregation: Aggregation::Mean,
            index: ClusterIndexKind::DaviesBouldin,
            batch_size: None,
            batches: 8,
            p: 2.0,
            seed: 0,
            retry_cap: 16,
        }
    }
}

/// Applies the dimensionality reduction and flattens each sample to a row.
pub fn reduce(reps: &Tensor, reduction: Reduction) -> (Vec<f64>, usize) {
    let reduced = match (reduction, reps.shape().len()) {
        (Reduction::MaxPool4, 4) => {
            let s = reps.shape();
            let window = 4.min(s[1]).min(s[2]);
            let shape = vec![s[0], s[1] - window + 1, s[2] - window + 1, s[3]];
            nn::maxpool_forward(reps, shape, window, 1)
        }
        _ => reps.clone(),
    };
    let dim = reduced.sample_len();
    let points: Vec<f64> = reduced.data().iter().map(|&v| v as f64).collect();
    match reduction {
        Reduction::Pca { components } => pca(&points, reps.batch(), dim, components),
        _ => (points, dim),
    }
}

/// Projects centred rows onto their top principal directions via the
/// `n x n` Gram matrix. Keeps `min(components, rank)` coordinates.
fn pca(points: &[f64], n: usize, dim: usize, components: usize) -> (Vec<f64>, usize) {
    let mut mean = vec![0.0; dim];
    for row in points.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = points
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let gram = DMatrix::<f64>::from_fn(n, n, |i, j| {
        centred[i * dim..(i + 1) * dim]
            .iter()
            .zip(&centred[j * dim..(j + 1) * dim])
            .map(|(a, b)| a * b)
            .sum()
    });
    let eig = SymmetricEigen::new(gram);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let top = values[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| values[i] > 1e-10 * top.max(f64::MIN_POSITIVE))
        .count();
    let keep = components.min(rank).max(1);
    let mut out = vec![0.0; n * keep];
    for (c, &e) in order.iter().take(keep).enumerate() {
        let scale = values[e].max(0.0).sqrt();
        for i in 0..n {
            out[i * keep + c] = eig.eigenvectors[(i, e)] * scale;
        }
    }
    (out, keep)
}

/// Clustering index of one reduced point set.
pub fn index_value(points: &[f64], dim: usize, labels: &[usize], cfg: &DbiConfig) -> Result<(f64, u64), MeasureError> {
    match cfg.index {
        ClusterIndexKind::DaviesBouldin => clustering::davies_bouldin(points, dim, labels, cfg.p, cfg.aggregation)
            .map(|v| (v.value, v.skipped_pairs))
            .ok_or_else(|| {
                let k = {
                    let mut l = labels.to_vec();
                    l.sort_unstable();
                    l.dedup();
                    l.len() as u64
                };
                MeasureError::DegenerateClustering {
                    skipped: k * k.saturating_sub(1),
                }
            }),
        ClusterIndexKind::Silhouette => clustering::silhouette(points, dim, labels)
            .map(|v| (v, 0))
            .ok_or(MeasureError::DegenerateClustering { skipped: 0 }),
        ClusterIndexKind::CalinskiHarabasz => clustering::calinski_harabasz(points, dim, labels)
            .map(|v| (v, 0))
            .ok_or(MeasureError::DegenerateClustering { skipped: 0 }),
    }
}

fn batch_ok(labels: &[usize], classes: usize) -> bool {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts.iter().filter(|&&c| c >= 2).count() >= 2
}

/// Clustering-quality measure of layer representations, averaged over
/// `cfg.batches` random minibatches. With the Davies-Bouldin index, larger
/// values predict a larger gap.
pub fn dbi_measure(model: &ModelSpec, data: &Dataset, cfg: &DbiConfig) -> Result<MeasureValue, MeasureError> {
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    if cfg.batches == 0 || cfg.p.is_nan() || cfg.p < 1.0 {
        return Err(MeasureError::Config("batches must be >= 1 and p >= 1".into()));
    }
    let classes = data.classes();
    let n = data.len();
    let batch_size = cfg.batch_size.unwrap_or(24 * classes).min(n);
    if batch_size < classes + 1 && batch_size < n {
        return Err(MeasureError::Config(format!(
            "batch size {batch_size} below the required classes + 1 = {}",
            classes + 1
        )));
    }
    let k = cfg.layer.resolve(model);
    if k > model.logits_index() {
        return Err(MeasureError::Config(format!("layer {k} beyond the logits")));
    }
    let mut total = 0.0;
    let mut skipped = 0u64;
    let mut resamples = 0u64;
    let all: Vec<usize> = (0..n).collect();
    for b in 0..cfg.batches {
        let mut chosen = None;
        for attempt in 0..cfg.retry_cap.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((b * cfg.retry_cap.max(1) + attempt) as u64);
            let mut idx = all.clone();
            idx.shuffle(&mut rng);
            idx.truncate(batch_size);
            idx.sort_unstable();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            if batch_ok(&labels, classes) {
                chosen = Some((idx, labels));
                break;
            }
            resamples += 1;
        }
        let (idx, labels) = chosen.ok_or(MeasureError::BatchResample {
            attempts: cfg.retry_cap.max(1),
        })?;
        let inputs = data.images().select(&idx).expect("batch indices");
        let reps = capture_layer(model, &inputs, k)?;
        let (points, dim) = reduce(&reps, cfg.reduction);
        let (v, s) = index_value(&points, dim, &labels, cfg)?;
        total += v;
        skipped += s;
    }
    let higher = cfg.index == ClusterIndexKind::DaviesBouldin;
    let id = match cfg.index {
        ClusterIndexKind::DaviesBouldin => "davies_bouldin",
        ClusterIndexKind::Silhouette => "silhouette",
        ClusterIndexKind::CalinskiHarabasz => "calinski_harabasz",
    };
    let mut mv = MeasureValue::new(id, total / cfg.batches as f64, cfg, higher);
    mv.layer = Some(k);
    mv.sample_budget = batch_size * cfg.batches;
    mv.seeds = vec![cfg.seed];
    mv.counters.insert("skipped_pairs".into(), skipped);
    mv.counters.insert("batch_resamples".into(), resamples);
    if skipped > 0 {
        mv.notes.push(format!(
            "{skipped} centroid pairs closer than {SEPARATION_EPS:e} were skipped"
        ));
    }
    Ok(mv)
}

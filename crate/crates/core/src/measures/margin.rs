//! Separability of representations: first-order distance of (possibly
//! perturbed) layer-`k` representations to the decision boundary between
//! the true class and its strongest competitor.
//!
//! For a representation `a` with label `i` and runner-up class `j`:
//!
//! ```text
//! d(a)  = (f_k(a)[i] - f_k(a)[j]) / || grad_a f_k(a)[i] - grad_a f_k(a)[j] ||_2
//! d^(a) = d(a) / sqrt(sum over coordinates of Var(a))
//! C     = -summary(d^)
//! ```
//!
//! Misclassified samples keep their negative margins.

use super::{capture_layer, logits_from, quantile_sorted, MeasureError, MeasureValue, SampleBudget, CHUNK};
use crate::data::Dataset;
use crate::model::ModelSpec;
use crate::nn::{self, grad_wrt_activation, runner_up, ActivationTrace};
use crate::tensor::Tensor;
use crate::vicinal::{augment, mixup_pairs, AugmentConfig, MixupSpec};
use serde::{Deserialize, Serialize};

/// Gradient-difference norms below this are treated as vanishing.
pub const GRAD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    None,
    Augment,
    Mixup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    /// Mean of the quantiles in `MarginConfig::quantiles`.
    QuantileMean,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    TotalVariation,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub layer: usize,
    pub perturbation: Perturbation,
    pub summary: Summary,
    pub quantiles: Vec<f64>,
    pub normalization: Normalization,
    /// Seed for the budget subsample.
    pub seed: u64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            layer: 0,
            perturbation: Perturbation::None,
            summary: Summary::QuantileMean,
            quantiles: vec![0.25, 0.5, 0.75],
            normalization: Normalization::TotalVariation,
            seed: 0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<(), MeasureError> {
        let q = &self.quantiles;
        let ordered = q.windows(2).all(|w| w[0] < w[1]);
        if self.summary == Summary::QuantileMean
            && (q.is_empty() || !ordered || q.iter().any(|&v| !(v > 0.0 && v < 1.0)))
        {
            return Err(MeasureError::Config(format!(
                "quantiles {q:?} must be strictly increasing inside (0, 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginDistribution {
    /// Unnormalized signed margins of the retained samples.
    pub raw: Vec<f64>,
    /// Margins divided by `scale`.
    pub normalized: Vec<f64>,
    /// Total-variation scale (1 when normalization is off).
    pub scale: f64,
    pub skipped: u64,
    pub total: u64,
}

/// `sqrt(sum_c Var(a_c))`, population variance over the sample axis.
pub fn total_variation(reps: &Tensor) -> f64 {
    let n = reps.batch() as f64;
    let d = reps.sample_len();
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for i in 0..reps.batch() {
        for (c, &v) in reps.sample(i).iter().enumerate() {
            sum[c] += v as f64;
            sq[c] += (v as f64) * (v as f64);
        }
    }
    sum.iter()
        .zip(&sq)
        .map(|(s, q)| (q / n - (s / n) * (s / n)).max(0.0))
        .sum::<f64>()
        .sqrt()
}

/// Margins of `reps` (activations at layer `k`) for their `labels`.
pub fn margin_distribution(
    model: &ModelSpec,
    k: usize,
    reps: &Tensor,
    labels: &[usize],
    normalization: Normalization,
) -> Result<MarginDistribution, MeasureError> {
    let logits = logits_from(model, k, reps)?;
    let classes = model.classes();
    let heads: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| (y, runner_up(&logits.data()[n * classes..(n + 1) * classes], y)))
        .collect();
    let mut raw = Vec::with_capacity(labels.len());
    let mut skipped = 0u64;
    for start in (0..labels.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(labels.len())).collect();
        let chunk = reps.select(&idx).expect("chunk indices");
        let grads = grad_wrt_activation(model, k, &chunk, &heads[start..start + idx.len()])?;
        for (local, &n) in idx.iter().enumerate() {
            let norm = grads
                .sample(local)
                .iter()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm < GRAD_EPS {
                skipped += 1;
                continue;
            }
            let (i, j) = heads[n];
            let row = &logits.data()[n * classes..(n + 1) * classes];
            raw.push((row[i] as f64 - row[j] as f64) / norm);
        }
    }
    let total = labels.len() as u64;
    if skipped * 2 > total {
        return Err(MeasureError::TooManySkipped { skipped, total });
    }
    let scale = match normalization {
        Normalization::TotalVariation => {
            let tv = total_variation(reps);
            if tv <= 0.0 {
                return Err(MeasureError::ZeroVariation(k));
            }
            tv
        }
        Normalization::None => 1.0,
    };
    Ok(MarginDistribution {
        normalized: raw.iter().map(|d| d / scale).collect(),
        raw,
        scale,
        skipped,
        total,
    })
}

/// Distribution summary used by the margin measure.
pub fn summarize(values: &[f64], summary: Summary, quantiles: &[f64]) -> f64 {
    match summary {
        Summary::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Summary::QuantileMean => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            quantiles.iter().map(|&q| quantile_sorted(&sorted, q)).sum::<f64>() / quantiles.len() as f64
        }
    }
}

/// Negated summary of the normalized margin distribution at layer
/// `cfg.layer`, optionally on augmented or label-wise mixed samples.
/// Larger values predict a larger gap.
pub fn margin_measure(
    model: &ModelSpec,
    data: &Dataset,
    cfg: &MarginConfig,
    budget: SampleBudget,
    aug: Option<&AugmentConfig>,
    mix: Option<&MixupSpec>,
) -> Result<MeasureValue, MeasureError> {
    cfg.validate()?;
    budget.validate()?;
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    let k = cfg.layer;
    if k > model.logits_index() {
        return Err(MeasureError::Config(format!("margin layer {k} beyond the logits")));
    }
    let idx = data.subsample_indices(budget.count(data.len()), cfg.seed);
    let batch = data.batch(&idx);
    let mut notes = Vec::new();
    let mut seeds = vec![cfg.seed];
    let (reps, labels) = match (cfg.perturbation, aug, mix) {
        (Perturbation::None, None, None) => (capture_layer(model, &batch.inputs, k)?, batch.labels.clone()),
        (Perturbation::Augment, Some(a), None) => {
            let out = augment(&batch, a)?;
            notes.extend(out.notices);
            seeds.push(a.seed);
            (capture_layer(model, &out.batch.inputs, k)?, out.batch.labels)
        }
        (Perturbation::Mixup, None, Some(m)) => {
            if m.layer > k {
                return Err(MeasureError::Config(format!(
                    "mixup layer {} is above the margin layer {k}",
                    m.layer
                )));
            }
            let mut trace = ActivationTrace::default();
            trace.insert(m.layer, capture_layer(model, &batch.inputs, m.layer)?);
            let mixed = mixup_pairs(&batch, data.classes(), m, &trace)?;
            seeds.push(m.seed);
            let reps = super::map_chunks(&mixed.representations, |c| nn::forward_between(model, m.layer, k, c))?;
            (reps, mixed.labels)
        }
        (p, a, m) => {
            return Err(MeasureError::Config(format!(
                "perturbation {p:?} inconsistent with augment config present = {}, mixup spec present = {}",
                a.is_some(),
                m.is_some()
            )))
        }
    };
    let dist = margin_distribution(model, k, &reps, &labels, cfg.normalization)?;
    let value = -summarize(&dist.normalized, cfg.summary, &cfg.quantiles);
    let id = match cfg.perturbation {
        Perturbation::None => "margin_summary",
        Perturbation::Augment => "augment_margin_summary",
        Perturbation::Mixup => "mixup_margin_summary",
    };
    #[derive(Serialize)]
    struct Snapshot<'a> {
        margin: &'a MarginConfig,
        augment: Option<&'a AugmentConfig>,
        mixup: Option<&'a MixupSpec>,
    }
    let mut mv = MeasureValue::new(
        id,
        value,
        Snapshot {
            margin: cfg,
            augment: aug,
            mixup: mix,
        },
        true,
    );
    mv.layer = Some(k);
    mv.sample_budget = idx.len();
    mv.seeds = seeds;
    mv.counters.insert("skipped_samples".into(), dist.skipped);
    mv.counters.insert("margin_samples".into(), dist.total);
    mv.notes = notes;
    Ok(mv)
}

//! Combined measure and reference baselines.

use super::{logits_from, quantile_sorted, MeasureError, MeasureValue, SampleBudget};
use crate::data::Dataset;
use crate::model::ModelSpec;
use crate::nn::{self, runner_up};
use crate::vicinal::{augment, AugmentConfig};
use serde::{Deserialize, Serialize};

/// Product of a Davies-Bouldin value and a mixup error. Both inputs must
/// grow with the gap.
pub fn combined_dbi_mixup(dbi: &MeasureValue, mix: &MeasureValue) -> Result<MeasureValue, MeasureError> {
    if !dbi.higher_means_larger_gap || !mix.higher_means_larger_gap {
        return Err(MeasureError::ConventionMismatch);
    }
    let mut mv = MeasureValue::new(
        "dbi_x_label_wise_mixup",
        dbi.value * mix.value,
        serde_json::json!({ "combination": "product" }),
        true,
    );
    mv.layer = dbi.layer;
    mv.sample_budget = dbi.sample_budget.max(mix.sample_budget);
    mv.seeds = dbi.seeds.iter().chain(&mix.seeds).copied().collect();
    mv.parents = vec![dbi.clone(), mix.clone()];
    Ok(mv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Spectral,
    Frobenius,
}

/// Percentile of the output margin used as `gamma`.
pub const MARGIN_PERCENTILE: f64 = 0.10;

/// `prod_i ||W_i||^2 / gamma^2`, `gamma` the 10th percentile of the output
/// margin `f[y] - max_{j != y} f[j]` over the sample budget. Conv kernels
/// are measured as `(kh*kw*in, out)` matrices.
pub fn norm_over_margin_baseline(
    model: &ModelSpec,
    data: &Dataset,
    kind: NormKind,
    budget: SampleBudget,
    seed: u64,
) -> Result<MeasureValue, MeasureError> {
    budget.validate()?;
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    let weights: Vec<_> = model.weights().collect();
    if weights.is_empty() {
        return Err(MeasureError::Config("model has no parameterized layer".into()));
    }
    let log_prod: f64 = weights
        .iter()
        .map(|w| {
            let n = match kind {
                NormKind::Spectral => nn::spectral_norm(w),
                NormKind::Frobenius => nn::frobenius_norm(w),
            };
            2.0 * n.ln()
        })
        .sum();
    let idx = data.subsample_indices(budget.count(data.len()), seed);
    let batch = data.batch(&idx);
    let logits = logits_from(model, 0, &batch.inputs)?;
    let c = model.classes();
    let mut margins: Vec<f64> = logits
        .data()
        .chunks(c)
        .zip(&batch.labels)
        .map(|(row, &y)| row[y] as f64 - row[runner_up(row, y)] as f64)
        .collect();
    margins.sort_by(f64::total_cmp);
    let gamma = quantile_sorted(&margins, MARGIN_PERCENTILE);
    let id = match kind {
        NormKind::Spectral => "prod_of_spec_over_margin",
        NormKind::Frobenius => "prod_of_fro_over_margin",
    };
    let value = if gamma > 0.0 {
        (log_prod - 2.0 * gamma.ln()).exp()
    } else {
        f64::INFINITY
    };
    let mut mv = MeasureValue::new(
        id,
        value,
        serde_json::json!({
            "norm": kind,
            "margin_percentile": MARGIN_PERCENTILE,
            "conv_norm": "kernel reshaped to (kh*kw*in, out)",
            "budget": budget,
        }),
        true,
    );
    mv.sample_budget = idx.len();
    mv.seeds = vec![seed];
    if gamma.is_nan() || gamma <= 0.0 {
        mv.flags.push("non_positive_margin".into());
        mv.notes
            .push(format!("10th-percentile output margin {gamma} is not positive"));
    }
    Ok(mv)
}

/// Mean cross-entropy of the model on augmented budget samples.
pub fn augment_performance(
    model: &ModelSpec,
    data: &Dataset,
    aug: &AugmentConfig,
    budget: SampleBudget,
) -> Result<MeasureValue, MeasureError> {
    budget.validate()?;
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    let idx = data.subsample_indices(budget.count(data.len()), aug.seed);
    let out = augment(&data.batch(&idx), aug)?;
    let logits = logits_from(model, 0, &out.batch.inputs)?;
    let c = model.classes();
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(&out.batch.labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            lse - row[y] as f64
        })
        .sum();
    let mut mv = MeasureValue::new("augment_performance", total / idx.len() as f64, aug, true);
    mv.sample_budget = idx.len();
    mv.seeds = vec![aug.seed];
    mv.notes = out.notices;
    Ok(mv)
}

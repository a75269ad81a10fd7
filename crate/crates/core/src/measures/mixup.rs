//! Robustness of representations: 0-1 error of the network on same-class
//! mixtures of training samples (raw inputs at layer 0, hidden
//! representations otherwise).

use super::{capture_layer, logits_from, MeasureError, MeasureValue, SampleBudget};
use crate::data::Dataset;
use crate::model::ModelSpec;
use crate::nn::{correct_mask, ActivationTrace};
use crate::vicinal::{mixup_pairs, MixupSpec};

/// Per-class 0-1 error on mixed samples, averaged over the classes that
/// formed at least one pair. Larger values predict a larger gap.
pub fn mixup_measure(
    model: &ModelSpec,
    data: &Dataset,
    spec: &MixupSpec,
    budget: SampleBudget,
) -> Result<MeasureValue, MeasureError> {
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    budget.validate()?;
    if spec.layer > model.logits_index() {
        return Err(MeasureError::Config(format!(
            "mixup layer {} beyond the logits",
            spec.layer
        )));
    }
    let idx = data.subsample_indices(budget.count(data.len()), spec.seed);
    let batch = data.batch(&idx);
    let mut trace = ActivationTrace::default();
    trace.insert(spec.layer, capture_layer(model, &batch.inputs, spec.layer)?);
    let mixed = mixup_pairs(&batch, data.classes(), spec, &trace)?;
    let logits = logits_from(model, spec.layer, &mixed.representations)?;
    let correct = correct_mask(&logits, &mixed.labels);

    let classes = data.classes();
    let mut errors = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&y, &ok) in mixed.labels.iter().zip(&correct) {
        counts[y] += 1;
        if !ok {
            errors[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| errors[c] as f64 / counts[c] as f64)
        .collect();
    let value = per_class.iter().sum::<f64>() / per_class.len() as f64;

    let id = if spec.layer == 0 {
        "label_wise_mixup"
    } else {
        "manifold_mixup"
    };
    let mut mv = MeasureValue::new(id, value, spec, true);
    mv.layer = Some(spec.layer);
    mv.sample_budget = idx.len();
    mv.seeds = vec![spec.seed];
    mv.counters.insert("pairs".into(), mixed.parents.len() as u64);
    mv.counters
        .insert("skipped_classes".into(), mixed.skipped_classes.len() as u64);
    if !mixed.skipped_classes.is_empty() {
        mv.notes.push(format!(
            "classes with a single sample skipped: {:?}",
            mixed.skipped_classes
        ));
    }
    Ok(mv)
}

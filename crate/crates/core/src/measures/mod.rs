//! Complexity measures computed post hoc from a trained model and its
//! training data. Every measure returns a [`MeasureValue`] carrying the
//! configuration, seeds and skip counters that produced it.

pub mod baselines;
pub mod clustering;
pub mod dbi;
pub mod margin;
pub mod mixup;

use crate::data::Dataset;
use crate::model::ModelSpec;
use crate::nn::{self, NnError};
use crate::tensor::Tensor;
use crate::vicinal::VicinalError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use baselines::{augment_performance, combined_dbi_mixup, norm_over_margin_baseline, NormKind};
pub use dbi::{dbi_measure, Aggregation, ClusterIndexKind, DbiConfig, LayerSelector, Reduction};
pub use margin::{
    margin_distribution, margin_measure, MarginConfig, MarginDistribution, Normalization, Perturbation, Summary,
};
pub use mixup::mixup_measure;

/// Forward passes are chunked to bound activation memory.
pub(crate) const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Vicinal(#[from] VicinalError),
    #[error("invalid measure config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyData,
    #[error("degenerate clustering: all {skipped} pairwise terms had coincident centroids")]
    DegenerateClustering { skipped: u64 },
    #[error("no batch with two classes of two samples after {attempts} attempts")]
    BatchResample { attempts: usize },
    #[error("{skipped} of {total} samples skipped (vanishing gradient difference)")]
    TooManySkipped { skipped: u64, total: u64 },
    #[error("representations at layer {0} have zero total variation")]
    ZeroVariation(usize),
    #[error("sign conventions differ: both inputs must grow with the gap")]
    ConventionMismatch,
}

/// One scalar complexity measure with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureValue {
    pub measure: String,
    #[serde(with = "extended_float")]
    pub value: f64,
    #[serde(default)]
    pub layer: Option<usize>,
    pub sample_budget: usize,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    /// `true` when larger values predict a larger generalization gap.
    pub higher_means_larger_gap: bool,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<MeasureValue>,
}

impl MeasureValue {
    pub(crate) fn new(measure: &str, value: f64, config: impl Serialize, higher_means_larger_gap: bool) -> Self {
        Self {
            measure: measure.to_string(),
            value,
            layer: None,
            sample_budget: 0,
            seeds: Vec::new(),
            config: serde_json::to_value(config).expect("config serializes"),
            higher_means_larger_gap,
            counters: BTreeMap::new(),
            flags: Vec::new(),
            notes: Vec::new(),
            parents: Vec::new(),
        }
    }

    /// Value oriented so that larger always means a larger predicted gap.
    pub fn oriented(&self) -> f64 {
        if self.higher_means_larger_gap {
            self.value
        } else {
            -self.value
        }
    }
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

/// How many training samples a measure may look at:
/// `min(N, max(floor, ceil(fraction * N)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleBudget {
    pub fraction: f64,
    pub floor: usize,
}

impl Default for SampleBudget {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            floor: 1000,
        }
    }
}

impl SampleBudget {
    pub fn full() -> Self {
        Self {
            fraction: 1.0,
            floor: 0,
        }
    }

    pub fn count(&self, n: usize) -> usize {
        let frac = (self.fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize;
        frac.max(self.floor).min(n)
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(MeasureError::Config(format!(
                "budget fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Eval-mode activation `k` for all inputs, in chunks.
pub(crate) fn capture_layer(model: &ModelSpec, inputs: &Tensor, k: usize) -> Result<Tensor, NnError> {
    map_chunks(inputs, |chunk| nn::forward_between(model, 0, k, chunk))
}

/// Eval-mode logits from activation `k`, in chunks.
pub(crate) fn logits_from(model: &ModelSpec, k: usize, reps: &Tensor) -> Result<Tensor, NnError> {
    map_chunks(reps, |chunk| nn::forward_from(model, k, chunk))
}

pub(crate) fn map_chunks(
    inputs: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<Tensor, NnError>,
) -> Result<Tensor, NnError> {
    let n = inputs.batch();
    if n <= CHUNK {
        return f(inputs);
    }
    let mut data = Vec::new();
    let mut sample_shape = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let out = f(&inputs.select(&idx).expect("chunk indices"))?;
        sample_shape = out.sample_shape().to_vec();
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend(sample_shape);
    Ok(Tensor::new(shape, data).expect("chunked shape"))
}

/// Fraction of samples whose true-class logit strictly beats every other
/// logit (one minus the empirical 0-1 loss; ties are errors).
pub fn accuracy(model: &ModelSpec, data: &Dataset) -> Result<f64, MeasureError> {
    if data.is_empty() {
        return Err(MeasureError::EmptyData);
    }
    let logits = logits_from(model, 0, data.images())?;
    let correct = nn::correct_mask(&logits, data.labels());
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

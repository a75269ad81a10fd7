//! How well a measure ranks models by generalization gap: Kendall's tau
//! and a conditional-mutual-information score over hyperparameter cells.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

/// Tag attached to every conditional-MI result.
pub const CMI_PROTOCOL: &str = "reconstructed protocol v1";

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("need at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("model {index} lacks hyperparameter axis {axis:?}")]
    MissingAxis { index: usize, axis: String },
    #[error("model {index} has a non-finite {what}")]
    NonFinite { index: usize, what: &'static str },
    #[error("no hyperparameter axis takes two distinct values")]
    NoVaryingAxis,
    #[error("score undefined: {0}")]
    Undefined(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub value: f64,
    pub gap: f64,
    pub hyperparameters: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub records: Vec<ScoreRecord>,
    pub axes: Vec<String>,
}

impl ScoreInput {
    pub fn new(records: Vec<ScoreRecord>, axes: Vec<String>) -> Result<Self, ScoreError> {
        if records.len() < 2 {
            return Err(ScoreError::TooFewModels(records.len()));
        }
        for (index, r) in records.iter().enumerate() {
            if r.value.is_nan() {
                return Err(ScoreError::NonFinite {
                    index,
                    what: "measure value",
                });
            }
            if !r.gap.is_finite() {
                return Err(ScoreError::NonFinite { index, what: "gap" });
            }
            if let Some(axis) = axes.iter().find(|a| !r.hyperparameters.contains_key(*a)) {
                return Err(ScoreError::MissingAxis {
                    index,
                    axis: axis.clone(),
                });
            }
        }
        Ok(Self { records, axes })
    }

    fn axis_value(&self, i: usize, axis: usize) -> f64 {
        self.records[i].hyperparameters[&self.axes[axis]]
    }
}

fn sign(a: f64, b: f64) -> i8 {
    match a.partial_cmp(&b) {
        Some(Ordering::Greater) => 1,
        Some(Ordering::Less) => -1,
        _ => 0,
    }
}

/// Tau over model pairs that are untied in both the measure and the gap.
pub fn kendall_tau(input: &ScoreInput) -> Result<f64, ScoreError> {
    let r = &input.records;
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for a in 0..r.len() {
        for b in a + 1..r.len() {
            match sign(r[a].value, r[b].value) * sign(r[a].gap, r[b].gap) {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let total = concordant + discordant;
    if total == 0 {
        return Err(ScoreError::Undefined("every model pair is tied"));
    }
    Ok((concordant - discordant) as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetSize {
    /// Every conditioning set with `|S| <= max_size`.
    AtMost,
    /// Only sets with `|S| == max_size`.
    Exactly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieHandling {
    /// Pairs with a zero difference in either variable are discarded.
    Drop,
    /// Zero differences form a third outcome.
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmiConfig {
    pub max_size: usize,
    pub set_size: SetSize,
    pub ties: TieHandling,
}

impl Default for CmiConfig {
    fn default() -> Self {
        Self {
            max_size: 2,
            set_size: SetSize::AtMost,
            ties: TieHandling::Drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmiScore {
    /// `100 * min_S I(V_mu; V_g | U_S) / H(V_g | U_S)`.
    pub score: f64,
    /// Axis names of the minimizing conditioning set.
    pub argmin: Vec<String>,
    /// Conditioning sets evaluated (with nonzero conditional entropy).
    pub sets: usize,
    pub protocol: String,
}

fn subsets(n: usize, max: usize, exact: bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << n) {
        let size = mask.count_ones() as usize;
        if size <= max && (!exact || size == max) {
            out.push((0..n).filter(|&i| mask >> i & 1 == 1).collect());
        }
    }
    out.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out
}

fn entropy(counts: impl IntoIterator<Item = f64>) -> f64 {
    let counts: Vec<f64> = counts.into_iter().collect();
    let total: f64 = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// `(I(V_mu; V_g | U_S), H(V_g | U_S))` from pooled counts over ordered
/// model pairs inside each cell of `set`.
fn conditional_terms(input: &ScoreInput, set: &[usize], ties: TieHandling) -> (f64, f64) {
    let n = input.records.len();
    let mut cells: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let key = set.iter().map(|&a| input.axis_value(i, a).to_bits()).collect();
        cells.entry(key).or_default().push(i);
    }
    let mut weighted_i = 0.0;
    let mut weighted_h = 0.0;
    let mut total = 0.0;
    for members in cells.values() {
        // joint[vm + 1][vg + 1]
        let mut joint = [[0.0f64; 3]; 3];
        for &a in members {
            for &b in members {
                if a == b {
                    continue;
                }
                let (ra, rb) = (&input.records[a], &input.records[b]);
                let vm = sign(ra.value, rb.value);
                let vg = sign(ra.gap, rb.gap);
                if ties == TieHandling::Drop && (vm == 0 || vg == 0) {
                    continue;
                }
                joint[(vm + 1) as usize][(vg + 1) as usize] += 1.0;
            }
        }
        let pairs: f64 = joint.iter().flatten().sum();
        if pairs == 0.0 {
            continue;
        }
        let hm = entropy((0..3).map(|m| joint[m].iter().sum::<f64>()));
        let hg = entropy((0..3).map(|g| (0..3).map(|m| joint[m][g]).sum::<f64>()));
        let hj = entropy(joint.iter().flatten().copied());
        weighted_i += pairs * (hm + hg - hj);
        weighted_h += pairs * hg;
        total += pairs;
    }
    if total == 0.0 {
        return (0.0, 0.0);
    }
    ((weighted_i / total).max(0.0), weighted_h / total)
}

/// Conditional-MI score in `[0, 100]`, minimized over conditioning sets of
/// hyperparameter axes. Sets whose conditional gap entropy is zero are
/// skipped.
pub fn conditional_mi_score(input: &ScoreInput, cfg: &CmiConfig) -> Result<CmiScore, ScoreError> {
    let varying = (0..input.axes.len()).any(|a| {
        let first = input.axis_value(0, a);
        (1..input.records.len()).any(|i| input.axis_value(i, a) != first)
    });
    if !varying {
        return Err(ScoreError::NoVaryingAxis);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut sets = 0;
    for set in subsets(input.axes.len(), cfg.max_size, cfg.set_size == SetSize::Exactly) {
        let (i, h) = conditional_terms(input, &set, cfg.ties);
        if h <= 0.0 {
            continue;
        }
        sets += 1;
        let ratio = (i / h).min(1.0);
        if best.as_ref().is_none_or(|(b, _)| ratio < *b) {
            best = Some((ratio, set));
        }
    }
    let (ratio, set) = best.ok_or(ScoreError::Undefined(
        "gap sign carries no entropy under any conditioning",
    ))?;
    Ok(CmiScore {
        score: 100.0 * ratio,
        argmin: set.iter().map(|&a| input.axes[a].clone()).collect(),
        sets,
        protocol: CMI_PROTOCOL.to_string(),
    })
}

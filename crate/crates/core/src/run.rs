//! Measure runs over a zoo: a run config, a resumable results file, and
//! score tables.
//!
//! Results are JSON lines sorted by `(model, measure)`, one
//! [`ResultRecord`] per pair. Scores are a pretty-printed [`ScoresFile`];
//! the report is a fixed-width text rendering of the same data.

use crate::data::Dataset;
use crate::io::{self, FormatError};
use crate::measures::{
    self, augment_performance, combined_dbi_mixup, dbi_measure, margin_measure, mixup_measure,
    norm_over_margin_baseline, DbiConfig, LayerSelector, MarginConfig, MeasureError, MeasureValue, NormKind,
    Perturbation, SampleBudget,
};
use crate::model::ModelSpec;
use crate::scoring::{conditional_mi_score, kendall_tau, CmiConfig, ScoreInput, ScoreRecord, CMI_PROTOCOL};
use crate::vicinal::{AugmentConfig, MixupSpec};
use crate::zoo::{Zoo, ZooError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SCORES_FILE: &str = "scores.json";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Results {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What a named measure computes. Seeds inside the nested configs are
/// replaced by the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureKind {
    Dbi {
        #[serde(default)]
        config: DbiConfig,
    },
    Mixup {
        #[serde(default)]
        config: MixupSpec,
        /// Overrides `config.layer` per model when set.
        #[serde(default)]
        layer: Option<LayerSelector>,
    },
    Margin {
        #[serde(default)]
        config: MarginConfig,
        #[serde(default)]
        augment: Option<AugmentConfig>,
        #[serde(default)]
        mixup: Option<MixupSpec>,
    },
    DbiXMixup {
        #[serde(default)]
        dbi: DbiConfig,
        #[serde(default)]
        mixup: MixupSpec,
    },
    NormOverMargin {
        norm: NormKind,
    },
    AugmentPerformance {
        #[serde(default)]
        config: AugmentConfig,
    },
    /// The same value for every model; a no-information reference row.
    Constant {
        #[serde(default)]
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: MeasureKind,
}

impl MeasureSpec {
    fn new(id: &str, kind: MeasureKind) -> Self {
        Self {
            id: id.to_string(),
            kind,
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s.kind {
            MeasureKind::Dbi { config } => config.seed = seed,
            MeasureKind::Mixup { config, .. } => config.seed = seed,
            MeasureKind::Margin { config, augment, mixup } => {
                config.seed = seed;
                if let Some(a) = augment {
                    a.seed = seed;
                }
                if let Some(m) = mixup {
                    m.seed = seed;
                }
            }
            MeasureKind::DbiXMixup { dbi, mixup } => {
                dbi.seed = seed;
                mixup.seed = seed;
            }
            MeasureKind::AugmentPerformance { config } => config.seed = seed,
            MeasureKind::NormOverMargin { .. } | MeasureKind::Constant { .. } => {}
        }
        s
    }
}

/// The full measure roster.
pub fn default_measures() -> Vec<MeasureSpec> {
    use MeasureKind::*;
    let dbi = DbiConfig::default();
    vec![
        MeasureSpec::new("dbi", Dbi { config: dbi.clone() }),
        MeasureSpec::new(
            "dbi_third_from_last",
            Dbi {
                config: DbiConfig {
                    layer: LayerSelector::ThirdFromLast,
                    ..dbi.clone()
                },
            },
        ),
        MeasureSpec::new(
            "silhouette",
            Dbi {
                config: DbiConfig {
                    index: measures::ClusterIndexKind::Silhouette,
                    ..dbi.clone()
                },
            },
        ),
        MeasureSpec::new(
            "calinski_harabasz",
            Dbi {
                config: DbiConfig {
                    index: measures::ClusterIndexKind::CalinskiHarabasz,
                    ..dbi.clone()
                },
            },
        ),
        MeasureSpec::new(
            "label_wise_mixup",
            Mixup {
                config: MixupSpec::default(),
                layer: None,
            },
        ),
        MeasureSpec::new(
            "manifold_mixup",
            Mixup {
                config: MixupSpec::default(),
                layer: Some(LayerSelector::First),
            },
        ),
        MeasureSpec::new(
            "margin",
            Margin {
                config: MarginConfig::default(),
                augment: None,
                mixup: None,
            },
        ),
        MeasureSpec::new(
            "augment_margin",
            Margin {
                config: MarginConfig {
                    perturbation: Perturbation::Augment,
                    ..MarginConfig::default()
                },
                augment: Some(AugmentConfig::default()),
                mixup: None,
            },
        ),
        MeasureSpec::new(
            "mixup_margin",
            Margin {
                config: MarginConfig {
                    perturbation: Perturbation::Mixup,
                    ..MarginConfig::default()
                },
                augment: None,
                mixup: Some(MixupSpec::default()),
            },
        ),
        MeasureSpec::new(
            "dbi_x_mixup",
            DbiXMixup {
                dbi,
                mixup: MixupSpec::default(),
            },
        ),
        MeasureSpec::new(
            "prod_of_spec_over_margin",
            NormOverMargin {
                norm: NormKind::Spectral,
            },
        ),
        MeasureSpec::new(
            "prod_of_fro_over_margin",
            NormOverMargin {
                norm: NormKind::Frobenius,
            },
        ),
        MeasureSpec::new(
            "augment_performance",
            AugmentPerformance {
                config: AugmentConfig::default(),
            },
        ),
        MeasureSpec::new("constant", Constant { value: 0.0 }),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub results: String,
    pub scores: String,
    pub report: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            results: RESULTS_FILE.into(),
            scores: SCORES_FILE.into(),
            report: REPORT_FILE.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub zoo: Option<PathBuf>,
    /// Output directory for results, scores and report.
    pub out: Option<PathBuf>,
    pub measures: Vec<MeasureSpec>,
    pub seed: u64,
    pub budget: SampleBudget,
    pub outputs: Outputs,
    pub parallel: usize,
    /// Score flagged (unsaturated or diverged) models too.
    pub include_flagged: bool,
    pub cmi: CmiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            zoo: None,
            out: None,
            measures: default_measures(),
            seed: 0,
            budget: SampleBudget::default(),
            outputs: Outputs::default(),
            parallel: 1,
            include_flagged: false,
            cmi: CmiConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let cfg: RunConfig = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let mut seen = BTreeSet::new();
        for (i, m) in self.measures.iter().enumerate() {
            if m.id.is_empty() || m.id.contains(char::is_whitespace) {
                return Err(RunError::Config(format!(
                    "measures[{i}].id: {:?} must be a non-empty token",
                    m.id
                )));
            }
            if !seen.insert(&m.id) {
                return Err(RunError::Config(format!("measures[{i}].id: duplicate id {:?}", m.id)));
            }
        }
        if !(self.budget.fraction > 0.0 && self.budget.fraction <= 1.0) {
            return Err(RunError::Config(format!(
                "budget.fraction: {} outside (0, 1]",
                self.budget.fraction
            )));
        }
        if self.cmi.max_size > 6 {
            return Err(RunError::Config(format!("cmi.max_size: {} above 6", self.cmi.max_size)));
        }
        Ok(())
    }

    /// Keeps only the measures named in `ids`, in config order.
    pub fn select_measures(&mut self, ids: &[String]) -> Result<(), RunError> {
        let known: BTreeSet<&String> = self.measures.iter().map(|m| &m.id).collect();
        if let Some(unknown) = ids.iter().find(|id| !known.contains(id)) {
            return Err(RunError::Config(format!("measures: unknown id {unknown:?}")));
        }
        self.measures.retain(|m| ids.contains(&m.id));
        Ok(())
    }
}

/// One `(model, measure)` outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub model: String,
    pub measure: String,
    /// Digest of everything the value depends on.
    pub hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<MeasureValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Computes one measure for one model. Sample-budget subsampling uses
/// `spec`'s (already seeded) configs.
pub fn compute_measure(
    spec: &MeasureSpec,
    model: &ModelSpec,
    data: &Dataset,
    budget: SampleBudget,
    seed: u64,
) -> Result<MeasureValue, MeasureError> {
    let mut mv = match &spec.kind {
        MeasureKind::Dbi { config } => dbi_measure(model, data, config)?,
        MeasureKind::Mixup { config, layer } => {
            let mut c = config.clone();
            if let Some(sel) = layer {
                c.layer = sel.resolve(model);
            }
            mixup_measure(model, data, &c, budget)?
        }
        MeasureKind::Margin { config, augment, mixup } => {
            margin_measure(model, data, config, budget, augment.as_ref(), mixup.as_ref())?
        }
        MeasureKind::DbiXMixup { dbi, mixup } => {
            let d = dbi_measure(model, data, dbi)?;
            let m = mixup_measure(model, data, mixup, budget)?;
            combined_dbi_mixup(&d, &m)?
        }
        MeasureKind::NormOverMargin { norm } => norm_over_margin_baseline(model, data, *norm, budget, seed)?,
        MeasureKind::AugmentPerformance { config } => augment_performance(model, data, config, budget)?,
        MeasureKind::Constant { value } => {
            let mut v = MeasureValue::new("constant", *value, serde_json::json!({ "value": value }), true);
            v.seeds = vec![seed];
            v
        }
    };
    mv.measure = spec.id.clone();
    Ok(mv)
}

fn provenance_hash(record: &io::ZooRecord, weights_crc: u32, spec: &MeasureSpec, budget: SampleBudget) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(record).expect("record serializes"));
    h.update(weights_crc.to_le_bytes());
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.update(serde_json::to_vec(&budget).expect("budget serializes"));
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    hex::encode(h.finalize())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Results {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), RunError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub computed: usize,
    pub reused: usize,
    pub failed: usize,
}

/// Evaluates every configured measure on every model of the zoo and writes
/// the results file. Records whose provenance hash is already present in
/// an existing results file are reused.
pub fn run_measures(
    zoo: &Zoo,
    cfg: &RunConfig,
    results_path: &Path,
    progress: &(dyn Fn(&ResultRecord) + Sync),
) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let previous: BTreeMap<(String, String), ResultRecord> = if results_path.is_file() {
        read_results(results_path)?
            .into_iter()
            .map(|r| ((r.model.clone(), r.measure.clone()), r))
            .collect()
    } else {
        BTreeMap::new()
    };
    let specs: Vec<MeasureSpec> = cfg.measures.iter().map(|m| m.with_seed(cfg.seed)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let per_model: Vec<Result<Vec<(ResultRecord, bool)>, RunError>> = pool.install(|| {
        zoo.manifest
            .records
            .par_iter()
            .map(|rec| {
                if specs.is_empty() {
                    return Ok(Vec::new());
                }
                let model = zoo.load_model(rec)?;
                let data = zoo.load_train(rec)?;
                let crc = io::model_checksum(&model);
                let mut out = Vec::with_capacity(specs.len());
                for spec in &specs {
                    let hash = provenance_hash(rec, crc, spec, cfg.budget);
                    if let Some(old) = previous.get(&(rec.id.clone(), spec.id.clone())) {
                        if old.hash == hash && old.error.is_none() {
                            out.push((old.clone(), true));
                            continue;
                        }
                    }
                    let (value, error) = match compute_measure(spec, &model, &data, cfg.budget, cfg.seed) {
                        Ok(v) => (Some(v), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    let r = ResultRecord {
                        model: rec.id.clone(),
                        measure: spec.id.clone(),
                        hash,
                        value,
                        error,
                    };
                    progress(&r);
                    out.push((r, false));
                }
                Ok(out)
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    let mut records = Vec::new();
    for model in per_model {
        for (r, reused) in model? {
            if reused {
                summary.reused += 1;
            } else if r.error.is_some() {
                summary.failed += 1;
            } else {
                summary.computed += 1;
            }
            records.push(r);
        }
    }
    records.sort_by(|a, b| (&a.model, &a.measure).cmp(&(&b.model, &b.measure)));
    write_results(results_path, &records)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub measure: String,
    /// Models entering the score.
    pub models: usize,
    /// Usable models without a value for this measure.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
    pub kendall_tau: Option<f64>,
    pub cmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmi_argmin: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub protocol: String,
    pub cmi: CmiConfig,
    pub axes: Vec<String>,
    /// Models excluded as flagged.
    pub excluded: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

/// Scores every measure in the results against the zoo's gaps. Values are
/// oriented so that larger means a larger predicted gap; rows are sorted by
/// measure id.
pub fn score_results(zoo: &Zoo, results: &[ResultRecord], cmi: &CmiConfig, include_flagged: bool) -> ScoresFile {
    let usable: Vec<&io::ZooRecord> = zoo
        .manifest
        .records
        .iter()
        .filter(|r| include_flagged || r.usable())
        .collect();
    let excluded = zoo
        .manifest
        .records
        .iter()
        .filter(|r| !(include_flagged || r.usable()))
        .map(|r| r.id.clone())
        .collect();
    let axes = zoo.manifest.axes.clone();
    let mut by_measure: BTreeMap<&str, BTreeMap<&str, &ResultRecord>> = BTreeMap::new();
    for r in results {
        by_measure.entry(&r.measure).or_default().insert(&r.model, r);
    }
    let mut rows = Vec::new();
    for (measure, per_model) in by_measure {
        let mut records = Vec::new();
        let mut missing = Vec::new();
        for z in &usable {
            match per_model.get(z.id.as_str()).and_then(|r| r.value.as_ref()) {
                Some(v) if !v.value.is_nan() => records.push(ScoreRecord {
                    value: v.oriented(),
                    gap: z.gap,
                    hyperparameters: z.hyperparameters.clone(),
                }),
                _ => missing.push(z.id.clone()),
            }
        }
        let mut notes = Vec::new();
        let (tau, cmi_score) = match ScoreInput::new(records.clone(), axes.clone()) {
            Ok(input) => {
                let tau = kendall_tau(&input)
                    .map_err(|e| notes.push(format!("kendall tau: {e}")))
                    .ok();
                let c = conditional_mi_score(&input, cmi)
                    .map_err(|e| notes.push(format!("cmi: {e}")))
                    .ok();
                (tau, c)
            }
            Err(e) => {
                notes.push(e.to_string());
                (None, None)
            }
        };
        rows.push(ScoreRow {
            measure: measure.to_string(),
            models: records.len(),
            missing,
            kendall_tau: tau,
            cmi: cmi_score.as_ref().map(|c| c.score),
            cmi_argmin: cmi_score.map(|c| c.argmin),
            notes,
        });
    }
    ScoresFile {
        protocol: CMI_PROTOCOL.to_string(),
        cmi: *cmi,
        axes,
        excluded,
        rows,
    }
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.decimals$}"))
}

/// Fixed-width text table of a scores file.
pub fn render_report(scores: &ScoresFile) -> String {
    let width = scores.rows.iter().map(|r| r.measure.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    out.push_str(&format!(
        "conditional MI: {}, |S| {:?} {}, ties {:?}\n",
        scores.protocol, scores.cmi.set_size, scores.cmi.max_size, scores.cmi.ties
    ));
    out.push_str(&format!("axes: {}\n", scores.axes.join(", ")));
    if !scores.excluded.is_empty() {
        out.push_str(&format!("excluded (flagged): {}\n", scores.excluded.join(", ")));
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<width$}  {:>6}  {:>8}  {:>7}  {}\n",
        "measure", "models", "tau", "cmi", "argmin"
    ));
    out.push_str(&format!("{}\n", "-".repeat(width + 37)));
    for r in &scores.rows {
        let argmin = match &r.cmi_argmin {
            Some(a) if a.is_empty() => "{}".to_string(),
            Some(a) => format!("{{{}}}", a.join(",")),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>8}  {:>7}  {}\n",
            r.measure,
            r.models,
            cell(r.kendall_tau, 3),
            cell(r.cmi, 2),
            argmin
        ));
    }
    let missing: Vec<String> = scores
        .rows
        .iter()
        .filter(|r| !r.missing.is_empty())
        .map(|r| format!("  {}: {}", r.measure, r.missing.join(", ")))
        .collect();
    if !missing.is_empty() {
        out.push_str("\nmissing values:\n");
        for m in missing {
            out.push_str(&m);
            out.push('\n');
        }
    }
    out
}

/// Scores and report for a results file, written next to it.
pub fn write_scores_and_report(
    zoo: &Zoo,
    results_path: &Path,
    scores_path: &Path,
    report_path: &Path,
    cmi: &CmiConfig,
    include_flagged: bool,
) -> Result<ScoresFile, RunError> {
    let results = read_results(results_path)?;
    let scores = score_results(zoo, &results, cmi, include_flagged);
    io::write_json(scores_path, &scores)?;
    fs::write(report_path, render_report(&scores)).map_err(io_err(report_path))?;
    Ok(scores)
}

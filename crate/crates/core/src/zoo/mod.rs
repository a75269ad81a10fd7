//! Desk-scale model zoos: a procedural dataset, a hyperparameter grid of
//! small CNNs trained to saturation, and a manifest of their gaps.
//!
//! Directory layout:
//!
//! ```text
//! zoo.json              manifest (config + one record per model)
//! test.gds              clean held-out split shared by all models
//! models/m000/          model.json, weights.bin, train.gds, record.json
//! ```

pub mod synth;
pub mod train;

use crate::data::{DataError, Dataset, Split};
use crate::io::{self, FormatError, ZooRecord};
use crate::measures::{accuracy, MeasureError};
use crate::model::{ModelError, ModelSpec};
use crate::nn::NnError;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub use synth::{corrupt_labels, generate_dataset, ShapeFamily, SynthConfig};
pub use train::{build_model, train, ArchSpec, Head, TrainOutcome, TrainSpec};

pub const ZOO_FORMAT: &str = "gengap-zoo";
pub const ZOO_VERSION: &str = "1.0";
pub const ZOO_MANIFEST: &str = "zoo.json";
pub const TEST_FILE: &str = "test.gds";
pub const TRAIN_FILE: &str = "train.gds";
pub const RECORD_FILE: &str = "record.json";

pub const FLAG_UNSATURATED: &str = "unsaturated";
pub const FLAG_DIVERGED: &str = "diverged";

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("invalid zoo config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists and is not empty (use force to overwrite)")]
    Exists(PathBuf),
    #[error("{0} is not empty and holds no zoo manifest; refusing to overwrite")]
    NotAZoo(PathBuf),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ZooError + '_ {
    move |source| ZooError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_samples: 512,
            test_samples: 512,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

/// Hyperparameter axes. Every combination is one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub label_noise: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            width: vec![8, 16],
            depth: vec![1, 2],
            batch_size: vec![32],
            dropout: vec![0.0],
            weight_decay: vec![0.0],
            label_noise: vec![0.0, 0.25, 0.5],
        }
    }
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub width: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub label_noise: f64,
}

impl GridPoint {
    pub fn hyperparameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("width".to_string(), self.width as f64),
            ("depth".to_string(), self.depth as f64),
            ("batch_size".to_string(), self.batch_size as f64),
            ("dropout".to_string(), self.dropout),
            ("weight_decay".to_string(), self.weight_decay),
            ("label_noise".to_string(), self.label_noise),
        ])
    }
}

impl Grid {
    pub fn len(&self) -> usize {
        self.width.len()
            * self.depth.len()
            * self.batch_size.len()
            * self.dropout.len()
            * self.weight_decay.len()
            * self.label_noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in row-major order (`label_noise` varies fastest).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &width in &self.width {
            for &depth in &self.depth {
                for &batch_size in &self.batch_size {
                    for &dropout in &self.dropout {
                        for &weight_decay in &self.weight_decay {
                            for &label_noise in &self.label_noise {
                                out.push(GridPoint {
                                    width,
                                    depth,
                                    batch_size,
                                    dropout,
                                    weight_decay,
                                    label_noise,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Axes taking at least two values.
    pub fn varying_axes(&self) -> Vec<String> {
        [
            ("batch_size", self.batch_size.len()),
            ("depth", self.depth.len()),
            ("dropout", self.dropout.len()),
            ("label_noise", self.label_noise.len()),
            ("weight_decay", self.weight_decay.len()),
            ("width", self.width.len()),
        ]
        .into_iter()
        .filter(|&(_, n)| n > 1)
        .map(|(a, _)| a.to_string())
        .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    pub dataset: DatasetSpec,
    pub grid: Grid,
    pub arch: ArchSpec,
    pub train: TrainSpec,
    pub seed: u64,
}

impl ZooConfig {
    pub fn validate(&self) -> Result<(), ZooError> {
        let bad = |field: String, why: String| Err(ZooError::Config(format!("{field}: {why}")));
        let d = &self.dataset;
        d.synth.validate(d.classes)?;
        if d.train_samples < 2 * d.classes || d.test_samples == 0 {
            return bad(
                "dataset.train_samples".into(),
                format!("need >= {} training and >= 1 test samples", 2 * d.classes),
            );
        }
        let g = &self.grid;
        for (name, len) in [
            ("width", g.width.len()),
            ("depth", g.depth.len()),
            ("batch_size", g.batch_size.len()),
            ("dropout", g.dropout.len()),
            ("weight_decay", g.weight_decay.len()),
            ("label_noise", g.label_noise.len()),
        ] {
            if len == 0 {
                return bad(format!("grid.{name}"), "axis has no values".into());
            }
        }
        type AxisRule = (&'static str, Vec<f64>, fn(f64) -> bool, &'static str);
        let checks: [AxisRule; 6] = [
            (
                "width",
                g.width.iter().map(|&v| v as f64).collect(),
                |v| v >= 1.0,
                ">= 1",
            ),
            (
                "depth",
                g.depth.iter().map(|&v| v as f64).collect(),
                |v| v >= 1.0,
                ">= 1",
            ),
            (
                "batch_size",
                g.batch_size.iter().map(|&v| v as f64).collect(),
                |v| v >= 1.0,
                ">= 1",
            ),
            ("dropout", g.dropout.clone(), |v| (0.0..1.0).contains(&v), "in [0, 1)"),
            (
                "weight_decay",
                g.weight_decay.clone(),
                |v| v >= 0.0 && v.is_finite(),
                ">= 0",
            ),
            (
                "label_noise",
                g.label_noise.clone(),
                |v| (0.0..1.0).contains(&v),
                "in [0, 1)",
            ),
        ];
        for (name, values, ok, rule) in checks {
            if let Some(i) = values.iter().position(|&v| !ok(v)) {
                return bad(format!("grid.{name}[{i}]"), format!("{} must be {rule}", values[i]));
            }
        }
        let a = &self.arch;
        let s = d.synth.image_size;
        if a.kernel == 0 || a.pool == 0 || a.pool > s {
            return bad(
                "arch".into(),
                format!("kernel {} / pool {} invalid for {s}px images", a.kernel, a.pool),
            );
        }
        let t = &self.train;
        if !(t.target_accuracy > 0.5 && t.target_accuracy <= 1.0) {
            return bad(
                "train.target_accuracy".into(),
                format!("{} outside (0.5, 1]", t.target_accuracy),
            );
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("train.learning_rate".into(), format!("{} must be > 0", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("train.momentum".into(), format!("{} outside [0, 1)", t.momentum));
        }
        if t.epoch_cap == 0 {
            return bad("train.epoch_cap".into(), "must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-model seed, independent of the build order.
pub fn model_seed(zoo_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(zoo_seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub format: String,
    pub version: String,
    pub config: ZooConfig,
    /// Hyperparameter axes that vary across the grid.
    pub axes: Vec<String>,
    pub test_data_path: String,
    pub records: Vec<ZooRecord>,
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub parallel: usize,
    /// Replace an existing zoo at the target directory.
    pub force: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            parallel: 1,
            force: false,
        }
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<(), ZooError> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_none();
        if !empty {
            if !force {
                return Err(ZooError::Exists(dir.to_path_buf()));
            }
            if !dir.join(ZOO_MANIFEST).is_file() {
                return Err(ZooError::NotAZoo(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir.join("models")).map_err(io_err(dir))
}

/// Label-noise seed shared by every model with the same corruption fraction.
fn corruption_seed(data_seed: u64, fraction: f64) -> u64 {
    data_seed ^ fraction.to_bits().rotate_left(17)
}

fn build_one(
    cfg: &ZooConfig,
    dir: &Path,
    index: usize,
    point: GridPoint,
    clean_train: &Dataset,
    test: &Dataset,
) -> Result<ZooRecord, ZooError> {
    let id = format!("m{index:03}");
    let seed = model_seed(cfg.seed, index);
    let (train_set, corrupted) = corrupt_labels(
        clean_train,
        point.label_noise,
        corruption_seed(cfg.dataset.seed, point.label_noise),
    )?;
    let mut model = build_model(
        &cfg.arch,
        clean_train.image_shape(),
        cfg.dataset.classes,
        point.width,
        point.depth,
        point.dropout,
        seed,
    )?;
    let outcome = train(
        &mut model,
        &train_set,
        &cfg.train,
        point.batch_size,
        point.weight_decay,
        seed,
    )?;
    let test_accuracy = accuracy(&model, test)?;
    let saturated = outcome.train_accuracy >= cfg.train.target_accuracy;
    let flag = if outcome.diverged {
        Some(FLAG_DIVERGED.to_string())
    } else if !saturated {
        Some(FLAG_UNSATURATED.to_string())
    } else {
        None
    };
    let model_path = format!("models/{id}");
    let model_dir = dir.join(&model_path);
    io::save_model(&model_dir, &model)?;
    io::save_dataset(&model_dir.join(TRAIN_FILE), &train_set)?;
    let record = ZooRecord {
        id,
        train_data_path: format!("{model_path}/{TRAIN_FILE}"),
        model_path,
        hyperparameters: point.hyperparameters(),
        train_accuracy: outcome.train_accuracy,
        test_accuracy,
        gap: outcome.train_accuracy - test_accuracy,
        seed,
        target_accuracy: cfg.train.target_accuracy,
        saturated,
        flag,
        epochs: outcome.epochs,
        final_loss: outcome.final_loss,
        corrupted,
    };
    io::write_json(&model_dir.join(RECORD_FILE), &record)?;
    Ok(record)
}

/// Generates the data, trains every grid point and writes the zoo.
/// `progress` is called once per finished model, from worker threads.
pub fn build_zoo(
    cfg: &ZooConfig,
    dir: &Path,
    opts: BuildOptions,
    progress: &(dyn Fn(&ZooRecord) + Sync),
) -> Result<ZooManifest, ZooError> {
    cfg.validate()?;
    prepare_dir(dir, opts.force)?;
    let d = &cfg.dataset;
    let train_seed = d.seed;
    let test_seed = d.seed ^ 0x7e57_7e57_7e57_7e57;
    let clean_train = generate_dataset(&d.synth, d.classes, d.train_samples, train_seed, Split::Train)?;
    let test = generate_dataset(&d.synth, d.classes, d.test_samples, test_seed, Split::Test)?;
    io::save_dataset(&dir.join(TEST_FILE), &test)?;
    let points = cfg.grid.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel.max(1))
        .build()
        .map_err(|e| ZooError::Pool(e.to_string()))?;
    let records: Vec<ZooRecord> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let r = build_one(cfg, dir, i, p, &clean_train, &test)?;
                progress(&r);
                Ok(r)
            })
            .collect::<Result<_, ZooError>>()
    })?;
    let manifest = ZooManifest {
        format: ZOO_FORMAT.to_string(),
        version: ZOO_VERSION.to_string(),
        config: cfg.clone(),
        axes: cfg.grid.varying_axes(),
        test_data_path: TEST_FILE.to_string(),
        records,
    };
    io::write_json(&dir.join(ZOO_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A zoo on disk.
#[derive(Clone, Debug)]
pub struct Zoo {
    pub root: PathBuf,
    pub manifest: ZooManifest,
}

impl Zoo {
    pub fn open(root: &Path) -> Result<Self, ZooError> {
        let manifest: ZooManifest = io::read_json(&root.join(ZOO_MANIFEST))?;
        if manifest.format != ZOO_FORMAT {
            return Err(FormatError::Magic {
                expected: ZOO_FORMAT,
                found: manifest.format,
            }
            .into());
        }
        if manifest.version.split('.').next() != ZOO_VERSION.split('.').next() {
            return Err(FormatError::UnsupportedVersion {
                found: manifest.version,
            }
            .into());
        }
        for r in &manifest.records {
            r.validate()?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn record(&self, id: &str) -> Option<&ZooRecord> {
        self.manifest.records.iter().find(|r| r.id == id)
    }

    pub fn load_model(&self, record: &ZooRecord) -> Result<ModelSpec, ZooError> {
        Ok(io::load_model(&self.root.join(&record.model_path))?)
    }

    pub fn load_train(&self, record: &ZooRecord) -> Result<Dataset, ZooError> {
        Ok(io::load_dataset(&self.root.join(&record.train_data_path))?)
    }

    pub fn load_test(&self) -> Result<Dataset, ZooError> {
        Ok(io::load_dataset(&self.root.join(&self.manifest.test_data_path))?)
    }
}

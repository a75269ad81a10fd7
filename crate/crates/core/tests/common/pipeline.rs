//! End-to-end helpers: build a zoo, evaluate measures, score them.

use gengap_core::measures::SampleBudget;
use gengap_core::run::{self, RunConfig, ScoresFile};
use gengap_core::zoo::{
    build_zoo, ArchSpec, BuildOptions, DatasetSpec, Grid, Head, SynthConfig, TrainSpec, Zoo, ZooConfig,
};
use std::path::Path;

/// 24 small models on 12 px images: width x depth x label noise x weight
/// decay. Sized to finish in a couple of minutes on one core.
pub fn acceptance_config() -> ZooConfig {
    ZooConfig {
        seed: 0,
        dataset: DatasetSpec {
            classes: 4,
            train_samples: 256,
            test_samples: 400,
            seed: 0,
            synth: SynthConfig {
                image_size: 12,
                ..SynthConfig::default()
            },
        },
        grid: Grid {
            width: vec![8, 16],
            depth: vec![1, 2],
            batch_size: vec![32],
            dropout: vec![0.0],
            weight_decay: vec![0.0, 5e-4],
            label_noise: vec![0.0, 0.25, 0.5],
        },
        arch: ArchSpec {
            head: Head::Flatten,
            ..ArchSpec::default()
        },
        train: TrainSpec {
            learning_rate: 0.02,
            ..TrainSpec::default()
        },
    }
}

/// A tiny zoo for fast tests.
pub fn small_config(points: usize) -> ZooConfig {
    let mut cfg = acceptance_config();
    cfg.dataset.train_samples = 64;
    cfg.dataset.test_samples = 64;
    cfg.dataset.synth.image_size = 8;
    cfg.grid = Grid {
        width: vec![4],
        depth: vec![1],
        batch_size: vec![16],
        dropout: vec![0.0],
        weight_decay: vec![0.0],
        label_noise: [0.0, 0.5, 0.25].into_iter().take(points).collect(),
    };
    cfg
}

pub fn build(cfg: &ZooConfig, dir: &Path, parallel: usize) -> Zoo {
    build_zoo(cfg, dir, BuildOptions { parallel, force: false }, &|_| {}).unwrap();
    Zoo::open(dir).unwrap()
}

/// Runs every default measure and scores them; files land in `out`.
pub fn measure_and_score(zoo: &Zoo, out: &Path, parallel: usize, budget: SampleBudget) -> ScoresFile {
    std::fs::create_dir_all(out).unwrap();
    let cfg = RunConfig {
        parallel,
        budget,
        ..RunConfig::default()
    };
    let o = &cfg.outputs;
    let results = out.join(&o.results);
    let summary = run::run_measures(zoo, &cfg, &results, &|_| {}).unwrap();
    assert_eq!(summary.failed, 0, "measure failures");
    run::write_scores_and_report(
        zoo,
        &results,
        &out.join(&o.scores),
        &out.join(&o.report),
        &cfg.cmi,
        cfg.include_flagged,
    )
    .unwrap()
}

mod common;

use common::checks;
use common::{oracle_tau, rng};
use gengap_core::scoring::{
    conditional_mi_score, kendall_tau, CmiConfig, ScoreInput, ScoreRecord, SetSize, TieHandling,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn input(values: &[f64], gaps: &[f64], axis: &[f64]) -> ScoreInput {
    let records = values
        .iter()
        .zip(gaps)
        .zip(axis)
        .map(|((&value, &gap), &a)| ScoreRecord {
            value,
            gap,
            hyperparameters: BTreeMap::from([("a".to_string(), a)]),
        })
        .collect();
    ScoreInput::new(records, vec!["a".into()]).unwrap()
}

#[test]
fn cmi_matches_enumeration() {
    let (d, _) = checks::cmi_oracle(1, 200);
    assert!(d.checked > 300, "{d:?}");
    assert!(d.worst <= 1e-10, "{d:?}");
}

#[test]
fn scores_ignore_monotone_transforms() {
    let (changed, tried) = checks::monotone_invariance(2, 100);
    assert_eq!(changed, 0, "of {tried}");
}

#[test]
fn independent_measure_scores_near_zero() {
    assert!(checks::independence_score(3, 46) < 5.0);
}

#[test]
fn perfect_predictor_scores_one_hundred() {
    let gaps = [0.1, 0.4, 0.2, 0.5, 0.3, 0.6];
    let values: Vec<f64> = gaps.iter().map(|g| g * 10.0).collect();
    let axis = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let i = input(&values, &gaps, &axis);
    assert_eq!(kendall_tau(&i).unwrap(), 1.0);
    let s = conditional_mi_score(&i, &CmiConfig::default()).unwrap();
    assert_eq!(s.score, 100.0);
}

#[test]
fn exact_set_size_skips_the_empty_set() {
    let gaps = [0.1, 0.4, 0.2, 0.5];
    let values = [1.0, 2.0, 4.0, 3.0];
    let i = input(&values, &gaps, &[0.0, 0.0, 1.0, 1.0]);
    let cfg = CmiConfig {
        max_size: 1,
        set_size: SetSize::Exactly,
        ..CmiConfig::default()
    };
    let s = conditional_mi_score(&i, &cfg).unwrap();
    assert_eq!(s.sets, 1);
    assert_eq!(s.argmin, vec!["a".to_string()]);
    let all = conditional_mi_score(&i, &CmiConfig::default()).unwrap();
    assert_eq!(all.sets, 2);
}

#[test]
fn kept_ties_change_nothing_without_ties() {
    let mut r = rng(4);
    let (i, _) = checks::random_zoo(&mut r, 8, 2);
    let mut i = i;
    for (n, rec) in i.records.iter_mut().enumerate() {
        rec.value += n as f64 * 1e-3;
        rec.gap += n as f64 * 1e-4;
    }
    let drop = conditional_mi_score(&i, &CmiConfig::default()).map(|s| s.score).ok();
    let keep = conditional_mi_score(
        &i,
        &CmiConfig {
            ties: TieHandling::Keep,
            ..CmiConfig::default()
        },
    )
    .map(|s| s.score)
    .ok();
    assert_eq!(drop, keep);
}

#[test]
fn constant_measure_has_no_tau() {
    let i = input(&[1.0; 4], &[0.1, 0.2, 0.3, 0.4], &[0.0, 1.0, 0.0, 1.0]);
    assert!(kendall_tau(&i).is_err());
}

#[test]
fn too_few_models_is_an_error() {
    let r = ScoreRecord {
        value: 1.0,
        gap: 0.1,
        hyperparameters: BTreeMap::new(),
    };
    assert!(ScoreInput::new(vec![r], vec![]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tau_matches_enumeration(seed in any::<u64>(), n in 3usize..15) {
        let mut r = rng(seed);
        let (i, _) = checks::random_zoo(&mut r, n, 1);
        let values: Vec<f64> = i.records.iter().map(|x| x.value).collect();
        let gaps: Vec<f64> = i.records.iter().map(|x| x.gap).collect();
        let want = oracle_tau(&values, &gaps);
        match kendall_tau(&i) {
            Ok(t) => prop_assert!((t - want).abs() <= 1e-12),
            Err(_) => prop_assert!(want.is_nan()),
        }
    }

    #[test]
    fn scores_are_bounded(seed in any::<u64>(), n in 3usize..12) {
        let mut r = rng(seed);
        let (i, _) = checks::random_zoo(&mut r, n, 2);
        if let Ok(t) = kendall_tau(&i) {
            prop_assert!((-1.0..=1.0).contains(&t));
        }
        if let Ok(s) = conditional_mi_score(&i, &CmiConfig::default()) {
            prop_assert!((0.0..=100.0).contains(&s.score));
        }
    }

    #[test]
    fn negating_the_measure_negates_tau(seed in any::<u64>(), n in 3usize..12) {
        let mut r = rng(seed);
        let (i, _) = checks::random_zoo(&mut r, n, 1);
        let mut neg = i.clone();
        for rec in &mut neg.records {
            rec.value = -rec.value;
        }
        if let (Ok(a), Ok(b)) = (kendall_tau(&i), kendall_tau(&neg)) {
            prop_assert_eq!(a, -b);
        }
    }
}

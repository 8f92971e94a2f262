use dcr_core::Matrix;
use dcr_eval::{
    classify_gap, fairness_metrics, group_accuracy, linear_probe_accuracy, removal_diagnostic, tcav_bootstrap,
    tcav_score, EvalError, EvalReport, DEFAULT_GAP_THRESHOLD,
};
use dcr_trainer::{EpochRecord, RunLog, RunStatus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tcav_trivial_cases() {
    assert_eq!(tcav_score(&[0.3, 2.0, 1e-9]).unwrap(), 1.0);
    assert_eq!(tcav_score(&[-0.3, -2.0]).unwrap(), 0.0);
    assert_eq!(tcav_score(&[1.0, -1.0, 2.0, 0.0]).unwrap(), 0.5);
    assert!(matches!(tcav_score(&[]), Err(EvalError::InvalidInput(_))));
}

#[test]
fn bootstrap_interval_brackets_the_score() {
    let s: Vec<f64> = (0..200).map(|i| if i % 4 == 0 { -1.0 } else { 1.0 }).collect();
    let (lo, hi) = tcav_bootstrap(&s, 1000, 0.95, 7).unwrap();
    assert!(lo <= 0.75 && 0.75 <= hi && lo >= 0.6 && hi <= 0.9, "{lo} {hi}");
    assert_eq!(tcav_bootstrap(&s, 1000, 0.95, 7).unwrap(), (lo, hi));
    assert_eq!(tcav_bootstrap(&[1.0; 5], 1000, 0.95, 1).unwrap(), (1.0, 1.0));
}

proptest! {
    #[test]
    fn tcav_of_negated_sensitivities_is_complementary(s in prop::collection::vec(
        prop_oneof![-1e3..-1e-6f64, 1e-6..1e3f64], 1..60)) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let (a, b) = (tcav_score(&s).unwrap(), tcav_score(&neg).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

/// Eight examples over four cells; per-cell accuracies 1/2, 1, 1, 2/3.
#[test]
fn worst_group_matches_hand_enumeration() {
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let attrs = [0, 0, 1, 1, 0, 1, 1, 1];
    let preds = [0, 1, 0, 0, 1, 1, 0, 1];
    let m = group_accuracy(&preds, &labels, &attrs, 2).unwrap();
    let acc: Vec<Option<f64>> = m.groups.iter().map(|g| g.accuracy).collect();
    assert_eq!(acc, vec![Some(0.5), Some(1.0), Some(1.0), Some(2.0 / 3.0)]);
    assert_eq!(m.groups.iter().map(|g| g.size).collect::<Vec<_>>(), vec![2, 2, 1, 3]);
    assert_eq!(m.worst_group_accuracy, 0.5);
    assert_eq!(m.worst_group, (0, 0));
    assert_eq!(m.overall_accuracy, 6.0 / 8.0);

    assert_eq!(group_accuracy(&labels, &labels, &attrs, 2).unwrap().worst_group_accuracy, 1.0);
    assert_eq!(group_accuracy(&[1; 8], &labels, &attrs, 2).unwrap().worst_group_accuracy, 0.0);
    assert!(matches!(group_accuracy(&[], &[], &[], 2), Err(EvalError::InvalidInput(_))));
}

#[test]
fn empty_groups_are_listed_but_not_scored() {
    let m = group_accuracy(&[0, 1, 2], &[0, 1, 2], &[0, 0, 1], 10).unwrap();
    assert_eq!(m.groups.len(), 20);
    assert_eq!(m.groups.iter().filter(|g| g.accuracy.is_some()).count(), 3);
    assert_eq!(m.worst_group_accuracy, 1.0);
}

proptest! {
    #[test]
    fn worst_group_bounds_overall_accuracy(rows in prop::collection::vec((0u8..3, 0u8..2, 0u8..3), 1..80)) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let attrs: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let preds: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let m = group_accuracy(&preds, &labels, &attrs, 3).unwrap();
        let best = m.groups.iter().filter_map(|g| g.accuracy).fold(0.0, f64::max);
        prop_assert!(m.worst_group_accuracy <= m.overall_accuracy + 1e-12);
        prop_assert!(m.overall_accuracy <= best + 1e-12);
        prop_assert!(m.groups.iter().filter_map(|g| g.accuracy).all(|a| (0.0..=1.0).contains(&a)));
    }
}

/// Twelve examples, three per cell. Positive rates by cell: (0,0) 1/3, (0,1) 2/3, (1,0) 1/3, (1,1) 1.
#[test]
fn fairness_matches_hand_enumeration() {
    let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let attrs = [0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1];
    let preds = [1, 0, 0, 1, 1, 0, 1, 0, 0, 1, 1, 1];
    let f = fairness_metrics(&preds, &labels, &attrs).unwrap();
    assert_eq!(f.positive_rate_by_attribute, [2.0 / 6.0, 5.0 / 6.0]);
    assert_eq!(f.positive_rate_by_cell, [[1.0 / 3.0, 2.0 / 3.0], [1.0 / 3.0, 1.0]]);
    assert_eq!(f.demographic_parity, 5.0 / 6.0 - 2.0 / 6.0);
    assert_eq!(f.equalized_odds, 1.0 - 1.0 / 3.0);
}

#[test]
fn fairness_trivial_cases() {
    let labels = [0, 1, 0, 1, 0, 1, 0, 1];
    let attrs = [0, 0, 1, 1, 0, 0, 1, 1];
    let f = fairness_metrics(&attrs, &labels, &attrs).unwrap();
    assert_eq!(f.demographic_parity, 1.0);
    // predictions repeat the same pattern within each attribute value
    let f = fairness_metrics(&[1, 0, 1, 0, 0, 1, 0, 1], &labels, &attrs).unwrap();
    assert_eq!(f.demographic_parity, 0.0);

    let err = fairness_metrics(&[0, 1, 1], &[0, 1, 1], &[0, 0, 1]).unwrap_err();
    assert!(matches!(err, EvalError::EmptyCell { label: 0, attribute: 1 }));
    assert!(err.to_string().contains("y=0, attribute a=1"));
    assert!(fairness_metrics(&[2], &[0], &[0]).is_err());
}

proptest! {
    #[test]
    fn fairness_is_symmetric_in_the_attribute(rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..2), 4..60)) {
        let mut rows = rows;
        rows.extend([(0, 0, 0), (0, 1, 1), (1, 0, 0), (1, 1, 1)]);
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let attrs: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let flipped: Vec<u8> = attrs.iter().map(|a| 1 - a).collect();
        let preds: Vec<u8> = rows.iter().map(|r| r.2).collect();
        let f = fairness_metrics(&preds, &labels, &attrs).unwrap();
        let g = fairness_metrics(&preds, &labels, &flipped).unwrap();
        prop_assert_eq!(f.demographic_parity, g.demographic_parity);
        prop_assert_eq!(f.equalized_odds, g.equalized_odds);
        prop_assert!((0.0..=1.0).contains(&f.demographic_parity) && (0.0..=1.0).contains(&f.equalized_odds));
    }
}

/// Train and test accuracies of the small-ResNet table; `true` for the rows marked successful.
const TABLE: [(f64, f64, bool); 15] = [
    (95.6, 94.4, true),
    (93.5, 90.9, true),
    (90.6, 90.9, true),
    (89.4, 93.2, true),
    (86.1, 90.5, true),
    (79.8, 98.9, true),
    (74.5, 97.4, true),
    (57.7, 100.0, false),
    (50.9, 100.0, false),
    (49.8, 100.0, false),
    (47.0, 100.0, false),
    (35.5, 100.0, false),
    (34.8, 100.0, false),
    (32.6, 100.0, false),
    (19.7, 100.0, false),
];

#[test]
fn removal_gap_reproduces_table_classification() {
    for (train, test, ok) in TABLE {
        assert_eq!(classify_gap(train, test, DEFAULT_GAP_THRESHOLD).removed, ok, "{train} / {test}");
    }
    assert!(classify_gap(90.0, 91.2, 10.0).removed);
    assert!(classify_gap(95.6, 94.4, 10.0).removed);
    assert!(!classify_gap(19.7, 100.0, 10.0).removed);
}

fn log_with(train: &[f64], test: &[f64]) -> RunLog {
    RunLog {
        method: "dcr".into(),
        label: "dcr".into(),
        status: RunStatus::Completed,
        failure: None,
        epochs: train
            .iter()
            .zip(test)
            .enumerate()
            .map(|(i, (&tr, &te))| EpochRecord {
                epoch: i + 1,
                train_accuracy: tr,
                eval_accuracy: [("test".to_string(), te)].into(),
                ..Default::default()
            })
            .collect(),
    }
}

#[test]
fn removal_diagnostic_reads_the_last_epoch() {
    let r = removal_diagnostic(&log_with(&[0.5, 0.9], &[0.2, 0.888]), "train", "test", 10.0).unwrap();
    assert_eq!(r.epoch, 2);
    assert!((r.gap - 1.2).abs() < 1e-9 && r.removed);
    let r = removal_diagnostic(&log_with(&[0.7, 0.7], &[0.7, 0.7]), "train", "test", 10.0).unwrap();
    assert_eq!(r.gap, 0.0);
    assert!(matches!(removal_diagnostic(&log_with(&[0.7], &[0.7]), "train", "clean", 10.0), Err(EvalError::Data(_))));
    assert!(matches!(removal_diagnostic(&log_with(&[], &[]), "train", "test", 10.0), Err(EvalError::Data(_))));
}

/// Gaussian blobs in `d` dimensions separated by `shift` along the first axis.
fn blobs(n: usize, d: usize, shift: f64, seed: u64) -> (Matrix<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let h = Matrix::from_fn(n, d, |i, j| {
        let g: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
        g + if j == 0 { shift * (2.0 * labels[i] as f64 - 1.0) } else { 0.0 }
    });
    (h, labels)
}

#[test]
fn probe_accuracy_on_separable_and_shuffled_concepts() {
    let (h, labels) = blobs(400, 10, 4.0, 1);
    let (acc, fit, held) = linear_probe_accuracy(&h, &labels, 0.01, 2).unwrap();
    assert!(acc >= 0.95, "{acc}");
    assert_eq!((fit, held), (280, 120));

    let (h, mut labels) = blobs(2000, 10, 4.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let (acc, ..) = linear_probe_accuracy(&h, &labels, 0.1, 5).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");

    let (h, labels) = blobs(60, 4, 4.0, 6);
    assert!(matches!(linear_probe_accuracy(&h, &labels, 0.1, 7), Err(EvalError::Data(_))));
}

#[test]
fn report_writes_json_and_csv() {
    let mut r = EvalReport::default();
    r.push("worst_group_accuracy", "", 0.25);
    r.push("group_accuracy", "y=3,a=1", 0.5);
    r.detail("note", &serde_json::json!({"k": 1})).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_json(&dir.path().join("r.json")).unwrap();
    r.write_csv(&dir.path().join("r.csv")).unwrap();
    let back: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv, "metric,scope,value\nworst_group_accuracy,,0.25\ngroup_accuracy,\"y=3,a=1\",0.5\n");
}

//! End-to-end checks across modules.

#![allow(clippy::field_reassign_with_default)]

use fedsched::datagen::PartitionSpec;
use fedsched::fltrain::ModelKind;
use fedsched::harness::{self, DataSpec, ExperimentConfig};
use fedsched::scheduler::PolicySpec;
use fedsched::wireless::Fading;
use proptest::prelude::*;

fn small(policy: PolicySpec, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.devices = 6;
    cfg.data = DataSpec::Synthetic { n: 240, dims: 6, classes: 4, mean_std: 1.5 };
    cfg.test_size = 60;
    cfg.partition = PartitionSpec::Shards(2);
    cfg.model = ModelKind::LogisticRegression;
    cfg.policy = policy;
    cfg.budget_s = 2.0;
    cfg.trials = 1;
    cfg.master_seed = seed;
    cfg
}

fn policies() -> impl Strategy<Value = PolicySpec> {
    prop_oneof![
        Just(PolicySpec::Fc),
        (1usize..=6).prop_map(PolicySpec::FixedN),
        (1usize..=6).prop_map(PolicySpec::Random),
        (1usize..=6).prop_map(PolicySpec::ProportionalFair),
        Just(PolicySpec::ClientSelection(0.4)),
        Just(PolicySpec::AsManyAsPossible(1.5)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rounds_fit_the_budget(policy in policies(), seed in 0u64..1000, rayleigh in any::<bool>(), err in 0.0f64..0.3) {
        let mut cfg = small(policy, seed);
        cfg.error_rel_std = err;
        if rayleigh {
            cfg.fading = Fading::Rayleigh;
        }
        let out = harness::run_trial(&cfg, 0).unwrap();
        let h = &out.history;
        let spent: f64 = h.records.iter().map(|r| r.t_star_s).sum();
        prop_assert!((spent - h.elapsed_s).abs() <= 1e-9 * spent.max(1.0));
        prop_assert!(h.elapsed_s <= cfg.budget_s);
        let aborted = h.aborted_round_s.expect("budget is finite, so some round overruns it");
        prop_assert!(h.elapsed_s + aborted > cfg.budget_s);
        for w in h.records.windows(2) {
            prop_assert!(w[0].cumulative_s < w[1].cumulative_s);
            prop_assert_eq!(w[0].round + 1, w[1].round);
        }
        for r in &h.records {
            prop_assert!(!r.scheduled.is_empty());
            if let PolicySpec::FixedN(n) | PolicySpec::Random(n) | PolicySpec::ProportionalFair(n) = policy {
                prop_assert_eq!(r.scheduled.len(), n);
            }
        }
    }
}

#[test]
fn classification_learns_something() {
    let mut cfg = small(PolicySpec::Fc, 3);
    cfg.budget_s = 10.0;
    cfg.eta = 0.1;
    cfg.partition = PartitionSpec::Iid;
    let out = harness::run_trial(&cfg, 0).unwrap();
    let acc = out.history.best_accuracy().unwrap();
    assert!(acc > 0.5, "accuracy {acc} with 4 classes");
    let first = out.history.records.first().unwrap().true_global_loss;
    let last = out.history.records.last().unwrap().true_global_loss;
    assert!(last < first);
}

#[test]
fn regression_has_no_accuracy_column() {
    let mut cfg = small(PolicySpec::FixedN(3), 1);
    cfg.data = DataSpec::Regression { n: 240, dims: 4, noise_std: 0.1 };
    cfg.model = ModelKind::LinearRegression;
    cfg.partition = PartitionSpec::Iid;
    let outcomes = harness::run_trials(&cfg).unwrap();
    let csv = String::from_utf8(harness::history_csv(&outcomes).unwrap()).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), harness::HISTORY_COLUMNS.len());
        assert_eq!(fields[10], "");
    }
}

#[test]
fn idx_files_drive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let (n, side) = (120usize, 3usize);
    let mut images = vec![0, 0, 8, 3];
    for v in [n, side, side] {
        images.extend((v as u32).to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let class = (i % 3) as u8;
        labels.push(class);
        images.extend((0..side * side).map(|p| if p % 3 == usize::from(class) { 200 } else { 20 }));
    }
    let img = dir.path().join("img.idx");
    let lab = dir.path().join("lab.idx");
    std::fs::write(&img, images).unwrap();
    std::fs::write(&lab, labels).unwrap();

    let mut cfg = small(PolicySpec::Fc, 0);
    cfg.data = DataSpec::Idx { images: img, labels: lab };
    cfg.test_size = 30;
    cfg.partition = PartitionSpec::Shards(1);
    let out = harness::run_trial(&cfg, 0).unwrap();
    assert!(out.rounds() > 0);
}

#[test]
fn sweep_of_one_value_matches_run() {
    let mut cfg = small(PolicySpec::Fc, 5);
    cfg.trials = 2;
    let dir = tempfile::tempdir().unwrap();
    let points = harness::sweep(&cfg, "phi", &["0.05".into()], dir.path()).unwrap();
    let outcomes = harness::run_trials(&cfg).unwrap();
    let direct = harness::SweepPoint::from_outcomes("0.05".into(), &outcomes);
    assert_eq!(points, vec![direct]);
    assert!(dir.path().join("sweep.csv").exists());
}

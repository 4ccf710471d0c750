use stockdd::augment;
use stockdd::data::SplitKind;
use stockdd::model::DisentangleModel;
use stockdd::pipeline::{self, RunLog, TrainConfig};
use stockdd::report;

fn tiny() -> TrainConfig {
    TrainConfig {
        seed: 3,
        n_stocks: 12,
        n_days: 110,
        hidden: 6,
        feature: 6,
        mlp_hidden: 6,
        batch_size: 64,
        epochs: 1,
        rounds: 2,
        patience: 2,
        backtest_k: vec![3, 5],
        ..TrainConfig::default()
    }
}

#[test]
fn run_directory_is_complete_and_reproducible() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = pipeline::run_training(&cfg, a.path()).unwrap();
    let sb = pipeline::run_training(&cfg, b.path()).unwrap();
    for f in [
        "config.toml",
        "dataset.json",
        "round_0.ckpt",
        "round_1.ckpt",
        "final.ckpt",
        "losses.csv",
        "epochs.csv",
        "rounds.csv",
        "predictions_test.csv",
        "predictions_valid.csv",
        "baseline.ckpt",
        "baseline_predictions_test.csv",
        "run.json",
        "backtest/curves.csv",
        "backtest/curves.svg",
    ] {
        let (x, y) = (a.path().join(f), b.path().join(f));
        assert!(x.exists(), "missing {f}");
        if f != "run.json" {
            assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap(), "{f} differs between runs");
        }
    }
    assert_eq!(sa.rounds, sb.rounds);

    // the written config reproduces the run
    let reloaded = TrainConfig::load(&a.path().join("config.toml")).unwrap();
    assert_eq!(reloaded, cfg);

    // evaluation only ever sees original held-out samples
    let ds = pipeline::prepare_dataset(&cfg).unwrap();
    let rows = report::read_predictions(&a.path().join("predictions_test.csv")).unwrap();
    assert_eq!(rows.len(), ds.indices(SplitKind::Test).len());
    assert!(rows.iter().all(|r| r.split == SplitKind::Test));
    for r in &rows {
        let s = r.prob_down.unwrap() + r.prob_steady.unwrap() + r.prob_up.unwrap();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    let rep = report::build_report(a.path()).unwrap();
    assert!(a.path().join("report.md").exists());
    let subsets = rep.subsets.unwrap();
    let sizes: Vec<usize> = subsets.iter().map(|s| s.size).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
}

#[test]
fn teachers_are_the_previous_students() {
    let cfg = tiny();
    let ds = pipeline::prepare_dataset(&cfg).unwrap();
    let mut log = RunLog::default();
    let dir = tempfile::tempdir().unwrap();
    let (initial, rec0) = pipeline::train_initial(&cfg, &ds, &mut log).unwrap();
    let out = pipeline::run_rounds(&cfg, &ds, &initial, &rec0, &mut log, Some(dir.path())).unwrap();
    assert_eq!(out.records.len(), 2);
    for (t, rec) in out.records.iter().enumerate() {
        assert_eq!(rec.teacher, Some(t));
        let (saved, _) = DisentangleModel::load(&dir.path().join(format!("round_{}.ckpt", t + 1))).unwrap();
        let student = &out.students[t];
        assert!(student
            .store
            .ids()
            .all(|id| student.store.get(id).data().iter().zip(saved.store.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits())));
    }
    assert!(out.final_round >= 1);
    // every batch obeys the composition identity
    for b in &log.batches {
        let w = stockdd::model::LossWeights { xi: if b.l_dis.is_some() { cfg.xi } else { 0.0 }, ..cfg.loss_weights() };
        assert!((b.l1 - b.report().composed_l1(&w)).abs() <= 1e-12);
    }
}

#[test]
fn augmentation_leaves_the_dataset_untouched() {
    let cfg = tiny();
    let ds = pipeline::prepare_dataset(&cfg).unwrap();
    let before = ds.clone();
    let model = DisentangleModel::new(cfg.model_config(), 1).unwrap();
    let train: Vec<_> = ds.indices(SplitKind::Train).into_iter().map(|i| &ds.samples[i]).collect();
    let ic = pipeline::teacher_trace(&model, &train, &[], ds.label_std()).unwrap().day_ic;
    let plan = augment::plan_pairs(&ds, &ic, f64::INFINITY, 0.33, 50, 4).unwrap();
    let out = augment::generate(&model, &plan, &ds).unwrap();
    assert_eq!(out.len(), 50);
    assert_eq!(ds, before);
    assert!(out.iter().all(|a| ds.split.kind_of(a.provenance.p_day) == Some(SplitKind::Train)
        && ds.split.kind_of(a.provenance.q_day) == Some(SplitKind::Train)));
}

use super::*;
use crate::data::generate_range;
use crate::tensor::Precision;

fn tiny_overrides() -> Vec<String> {
    [
        "data.synthetic.num_classes=8",
        "data.synthetic.channels=4",
        "data.synthetic.height=16",
        "data.synthetic.width=16",
        "data.synthetic.max_classes_per_image=3",
        "data.synthetic.class_count_distribution=[0.25, 0.5, 0.25]",
        "data.train_size=12",
        "data.test_size=6",
        "model.dim=16",
        "model.depth=1",
        "model.heads=2",
        "model.mlp_ratio=2",
        "train.epochs=2",
        "train.batch_size=4",
        "train.independent_ml_epochs=2",
        "selection.kappa=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tiny(extra: &[&str]) -> ExperimentConfig {
    let mut o = tiny_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::with_overrides(None, &o).unwrap()
}

fn run(cfg: &ExperimentConfig) -> (AnyModel, RunReport) {
    let (train_set, test_set) = load_datasets(cfg).unwrap();
    run_experiment(cfg, &train_set, &test_set, &mut |_, _| {}).unwrap()
}

#[test]
fn zero_epochs_still_reports() {
    let cfg = tiny(&["train.epochs=0"]);
    let (model, report) = run(&cfg);
    assert!(report.steps.is_empty() && report.epochs.is_empty());
    assert_eq!(report.ranks_trained, 0);
    assert_eq!(report.tau_rank_spearman, None);
    assert!(report.inverse_tau.iter().all(|&v| (v - 10.0).abs() < 1e-5));
    assert!((0.0..=1.0).contains(&report.metrics.miou));
    assert_eq!(report.ml_head_evaluations, cfg.data.test_size as u64);
    assert!(matches!(model, AnyModel::F32(_)));
}

#[test]
fn baseline_never_touches_a_multilabel_head() {
    let (_, report) = run(&tiny(&["mode=BASELINE"]));
    assert_eq!(report.ml_head_evaluations, 0);
    assert_eq!(report.metrics.map, None);
    assert_eq!(report.cost.params_ml_head, 0);
    assert!(report.tau_shared);
    assert_eq!(report.metrics.selection, "complete");
    assert_eq!(report.metrics.excluded_pixel_rate, 0.0);
}

#[test]
fn joint_run_counts_head_evaluations() {
    let cfg = tiny(&[]);
    let (_, report) = run(&cfg);
    let expect = cfg.train.epochs * cfg.data.train_size + cfg.data.test_size;
    assert_eq!(report.ml_head_evaluations, expect as u64);
    assert_eq!(report.steps.len(), cfg.train.epochs * 3);
    assert_eq!(report.ranks_trained, 4);
    assert!(report.metrics.map.is_some());
    assert_eq!(report.metrics.mean_selected, 4.0);
    assert!(report.cost.macs_per_image > 0);
    assert!(report.cost.params_total > report.cost.params_backbone);
}

#[test]
fn reports_are_deterministic() {
    for extra in [&[][..], &["train.precision=\"f64\"", "mode=MT"][..]] {
        let cfg = tiny(extra);
        let (_, a) = run(&cfg);
        let (_, b) = run(&cfg);
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.without_timing().to_json().unwrap(), b.without_timing().to_json().unwrap());
    }
    let (_, a) = run(&tiny(&[]));
    let (_, c) = run(&tiny(&["train.seed=1"]));
    assert_ne!(a.steps, c.steps);
}

#[test]
fn reported_total_decomposes_every_step() {
    for mode in ["MT", "MT_LS_RA"] {
        let cfg = tiny(&[&format!("mode={mode}"), "train.precision=\"f64\"", "loss.seg_weight=0.7", "loss.ml_weight=3"]);
        let (_, report) = run(&cfg);
        assert!(!report.steps.is_empty());
        for r in report.steps.iter().chain(&report.epochs) {
            let combined = 0.7 * r.seg + 3.0 * r.ml;
            assert!((r.total - combined).abs() <= 1e-12, "{mode} step {}: {} vs {combined}", r.index, r.total);
            assert!(r.ml > 0.0 && r.seg > 0.0);
        }
    }
}

#[test]
fn complete_baseline_eval_equals_fixed_k() {
    let cfg = tiny(&["mode=BASELINE", "train.epochs=1"]);
    let (model, _) = run(&cfg);
    let AnyModel::F32(model) = model else { panic!("f32 expected") };
    let test_set = generate_range(&cfg.data.synthetic, TEST_STREAM_OFFSET, 6).unwrap();
    let k = cfg.num_classes();
    for s in &test_set.samples {
        let a = predict_image(&model, &s.image, &s.multilabel, SelectionPolicy::Complete, None).unwrap();
        let b = predict_image(&model, &s.image, &s.multilabel, SelectionPolicy::Fixed(k), None).unwrap();
        assert_eq!(a.classes, b.classes);
    }
    let a = evaluate(&model, &test_set, SelectionPolicy::Complete).unwrap();
    let b = evaluate(&model, &test_set, SelectionPolicy::Fixed(k)).unwrap();
    assert_eq!(a.per_class_iou, b.per_class_iou);
    assert_eq!(a.miou, b.miou);
}

#[test]
fn selecting_every_class_with_shared_tau_matches_plain_multitask() {
    let cfg = tiny(&["mode=MT", "train.epochs=1"]);
    let (model, _) = run(&cfg);
    let mut file = model.to_file();
    file.config.mode = Mode::MtLs;
    file.config.selection.kappa = cfg.num_classes();
    let AnyModel::F32(mt) = model else { panic!() };
    let AnyModel::F32(mtls) = AnyModel::from_file(&file).unwrap() else { panic!() };
    let test_set = generate_range(&cfg.data.synthetic, TEST_STREAM_OFFSET, 20).unwrap();
    let ls_policy = SelectionPolicy::for_evaluation(&mtls.config);
    assert_eq!(ls_policy, SelectionPolicy::Fixed(cfg.num_classes()));
    for s in &test_set.samples {
        let a = predict_image(&mt, &s.image, &s.multilabel, SelectionPolicy::Complete, None).unwrap();
        let b = predict_image(&mtls, &s.image, &s.multilabel, ls_policy, None).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.presence, b.presence);
    }
}

#[test]
fn eval_kappa_may_differ_from_training() {
    let cfg = tiny(&["train.epochs=1"]);
    let (model, _) = run(&cfg);
    let (_, test_set) = load_datasets(&cfg).unwrap();
    for kappa in [1, 2, 7, 8] {
        let m = model.evaluate(&test_set, SelectionPolicy::Fixed(kappa)).unwrap();
        assert_eq!(m.mean_selected, kappa as f64);
        assert_eq!(m.selection, format!("fixed_k={kappa}"));
    }
    assert!(model.evaluate(&test_set, SelectionPolicy::Fixed(9)).is_err());
    let with_eval = tiny(&["train.epochs=1", "eval.kappa=6"]);
    let (_, report) = run(&with_eval);
    assert_eq!(report.metrics.mean_selected, 6.0);
    assert_eq!(report.ranks_trained, 4);
}

#[test]
fn oracle_modes_select_ground_truth() {
    let (_, gt) = run(&tiny(&["oracle=GT_TRAIN_EVAL", "train.epochs=1"]));
    assert_eq!(gt.metrics.selection, "oracle_gt");
    assert_eq!(gt.metrics.excluded_pixel_rate, 0.0);
    let (_, gt_eval) = run(&tiny(&["oracle=GT_EVAL", "train.epochs=1"]));
    assert_eq!(gt_eval.metrics.selection, "oracle_gt");
    assert_eq!(gt_eval.ranks_trained, 4);
    let (_, base) = run(&tiny(&["oracle=GT_TRAIN_EVAL", "mode=BASELINE", "train.epochs=1"]));
    assert_eq!(base.ml_head_evaluations, 0);
    assert_eq!(base.metrics.excluded_pixel_rate, 0.0);
}

#[test]
fn model_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [&["train.epochs=1"][..], &["scheme=INDEPENDENT", "train.epochs=1", "train.precision=\"f64\""][..]] {
        let cfg = tiny(extra);
        let (model, report) = run(&cfg);
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = AnyModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        let (_, test_set) = load_datasets(&cfg).unwrap();
        let policy = SelectionPolicy::for_evaluation(&cfg);
        assert_eq!(back.evaluate(&test_set, policy).unwrap(), report.metrics);
        assert_eq!(back.inverse_tau(), model.inverse_tau());
    }
    let (model, _) = run(&tiny(&["train.epochs=0"]));
    let mut file = model.to_file();
    file.segmenter.pop();
    assert!(AnyModel::from_file(&file).is_err());
    let mut file = model.to_file();
    file.segmenter[0].shape.push(1);
    assert!(AnyModel::from_file(&file).is_err());
    let mut file = model.to_file();
    file.format = "other".into();
    assert!(AnyModel::from_file(&file).is_err());
}

#[test]
fn independent_scheme_trains_in_two_phases() {
    let cfg = tiny(&["scheme=INDEPENDENT"]);
    let (model, report) = run(&cfg);
    assert_eq!(report.multilabel_epochs.len(), 2);
    let n = cfg.data.train_size as u64;
    let expect = 2 * n + n + cfg.data.test_size as u64;
    assert_eq!(report.ml_head_evaluations, expect);
    assert!(report.metrics.map.is_some());
    assert!(report.cost.params_multilabel_model > 0);
    assert_eq!(report.cost.params_ml_head, 0);
    for r in &report.epochs {
        assert_eq!(r.ml, 0.0);
        assert_eq!(r.total, r.seg);
    }
    let AnyModel::F32(m) = model else { panic!() };
    assert!(m.multilabel.is_some() && m.segmenter.ml_head.is_none());
}

#[test]
fn fresh_model_tau_dump() {
    let model = AnyModel::init(&tiny(&[])).unwrap();
    let rows = dump_tau(&model);
    assert_eq!(rows.len(), 8);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.rank, (i + 1).to_string());
        assert!((r.inverse_tau - 10.0).abs() < 1e-5, "{r:?}");
    }
    let f64_model = AnyModel::init(&tiny(&["train.precision=\"f64\""])).unwrap();
    assert!(dump_tau(&f64_model).iter().all(|r| (r.inverse_tau - 10.0).abs() < 1e-12));

    let shared = AnyModel::init(&tiny(&["mode=MT_LS"])).unwrap();
    let rows = dump_tau(&shared);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].rank, "shared");

    let mut buf = Vec::new();
    write_tau_csv(&dump_tau(&model), &mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("rank,inverse_tau\n"));
    assert_eq!(read_tau_csv(buf.as_slice()).unwrap(), dump_tau(&model));
    assert!(read_tau_csv("a,b\n1,2\n".as_bytes()).is_err());
}

#[test]
fn trained_rank_adaptive_run_reports_spearman() {
    let (_, report) = run(&tiny(&[]));
    let expect = tau_rank_correlation(&report.inverse_tau, report.ranks_trained);
    assert_eq!(report.tau_rank_spearman, expect);
    assert!(expect.is_some());
    let (_, shared) = run(&tiny(&["mode=MT_LS"]));
    assert_eq!(shared.tau_rank_spearman, None);
}

#[test]
fn single_point_sweep_equals_one_run() {
    let cfg = tiny(&[]);
    let (train_set, test_set) = load_datasets(&cfg).unwrap();
    let axis = SweepAxis::parse("kappa=4").unwrap();
    let result = ablation_sweep(&cfg, &axis, &[0], 1, &train_set, &test_set, None).unwrap();
    let (_, direct) = run_experiment(&cfg, &train_set, &test_set, &mut |_, _| {}).unwrap();
    assert_eq!(result.reports.len(), 1);
    assert_eq!(result.reports[0].as_ref().unwrap().without_timing(), direct.without_timing());
    assert_eq!(result.rows.len(), 2);
    assert_eq!(result.rows[0].miou, Some(direct.metrics.miou));
    assert_eq!(result.rows[1].seed, "mean");
    assert_eq!(result.rows[1].miou, Some(direct.metrics.miou));
}

#[test]
fn kappa_sweep_means_match_hand_sums() {
    let cfg = tiny(&[
        "data.synthetic.num_classes=64",
        "train.epochs=1",
        "data.train_size=8",
        "data.test_size=4",
    ]);
    let (train_set, test_set) = load_datasets(&cfg).unwrap();
    let axis = SweepAxis::parse("kappa=8,16,32,64").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let result = ablation_sweep(&cfg, &axis, &[0, 1, 2], 3, &train_set, &test_set, Some(dir.path())).unwrap();
    let runs: Vec<&SweepRow> = result.rows.iter().filter(|r| r.seed != "mean").collect();
    assert_eq!(runs.len(), 12);
    assert_eq!(result.rows.len(), 16);
    for (vi, value) in ["8", "16", "32", "64"].iter().enumerate() {
        let block = &result.rows[vi * 4..vi * 4 + 4];
        assert!(block.iter().all(|r| r.value == *value && r.error.is_none()));
        assert_eq!(block.iter().map(|r| r.seed.as_str()).collect::<Vec<_>>(), ["0", "1", "2", "mean"]);
        let mut hand = 0.0;
        for (si, row) in block[..3].iter().enumerate() {
            let report = result.reports[vi * 3 + si].as_ref().unwrap();
            assert_eq!(row.miou, Some(report.metrics.miou));
            assert_eq!(report.config.selection.kappa.to_string(), *value);
            assert_eq!(report.seed, si as u64);
            let on_disk = RunReport::load(&dir.path().join(format!("kappa={value}/seed={si}/report.json"))).unwrap();
            assert_eq!(&on_disk, report);
            hand += report.metrics.miou;
        }
        assert!((block[3].miou.unwrap() - hand / 3.0).abs() < 1e-12);
    }

    let mut csv_buf = Vec::new();
    write_sweep_csv(&result.rows, &mut csv_buf).unwrap();
    assert_eq!(read_sweep_csv(csv_buf.as_slice()).unwrap(), result.rows);
    let json = serde_json::to_string(&result).unwrap();
    let back: SweepResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, result);
}

#[test]
fn failing_sweep_runs_are_recorded() {
    let cfg = tiny(&["train.epochs=1"]);
    let (train_set, test_set) = load_datasets(&cfg).unwrap();
    let axis = SweepAxis::parse("kappa=2,99").unwrap();
    let result = ablation_sweep(&cfg, &axis, &[0, 1], 2, &train_set, &test_set, None).unwrap();
    assert_eq!(result.rows.len(), 6);
    assert!(result.rows[..3].iter().all(|r| r.error.is_none() && r.miou.is_some()));
    for r in &result.rows[3..5] {
        assert!(r.error.as_deref().unwrap().contains("selection.kappa"), "{r:?}");
        assert_eq!(r.miou, None);
    }
    assert_eq!(result.rows[5].miou, None);
    assert!(result.reports[2].is_none() && result.reports[3].is_none());

    let tau_axis = SweepAxis::parse("tau_mode=shared,rank_adaptive").unwrap();
    assert_eq!(tau_axis.overrides("shared").unwrap(), vec!["mode=\"MT_LS\"".to_string()]);
    assert!(tau_axis.overrides("other").is_err());
    assert!(SweepAxis::parse("depth=1,2").is_err());
    assert!(SweepAxis::parse("kappa").is_err());
    assert!(SweepAxis::parse("kappa=").is_err());
}

#[test]
fn head_variant_and_weight_axes_apply() {
    let cfg = tiny(&["train.epochs=1"]);
    let (train_set, test_set) = load_datasets(&cfg).unwrap();
    let axis = SweepAxis::parse("head_variant=gap_linear,tran_dec2").unwrap();
    let result = ablation_sweep(&cfg, &axis, &[0], 1, &train_set, &test_set, None).unwrap();
    let heads: Vec<String> = result
        .reports
        .iter()
        .map(|r| r.as_ref().unwrap().config.head_variant.to_string())
        .collect();
    assert_eq!(heads, ["gap_linear", "tran_dec2"]);
    let axis = SweepAxis::parse("ml_weight=0.5").unwrap();
    let result = ablation_sweep(&cfg, &axis, &[0], 1, &train_set, &test_set, None).unwrap();
    assert_eq!(result.reports[0].as_ref().unwrap().config.loss.ml_weight, 0.5);
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let cfg = tiny(&[]);
    let other = tiny(&["data.synthetic.num_classes=9"]);
    let (train_set, _) = load_datasets(&other).unwrap();
    let (_, test_set) = load_datasets(&cfg).unwrap();
    let err = run_experiment(&cfg, &train_set, &test_set, &mut |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("data.train_path")), "{err}");

    let missing = tiny(&["data.test_path=/nonexistent/test.rseg"]);
    let err = load_datasets(&missing).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("data.test_path")), "{err}");
}

#[test]
fn precision_is_honoured() {
    let cfg = tiny(&["train.precision=\"f64\"", "train.epochs=0"]);
    assert_eq!(cfg.train.precision, Precision::F64);
    assert!(matches!(AnyModel::init(&cfg).unwrap(), AnyModel::F64(_)));
}

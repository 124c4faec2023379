use std::path::Path;
use std::process::{Command, Output};

fn rankseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_exits_zero() {
    let o = rankseg(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("Usage") && text.contains("--set") && text.contains("--seed"), "{text}");
    assert_eq!(rankseg(&["--help"]).status.code(), Some(0));
    assert_eq!(rankseg(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rankseg(&[]).status.code(), Some(1));
    assert_eq!(rankseg(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(rankseg(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_path_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rankseg(&["train", "--set", "data.train_path=/nonexistent/train.rseg", "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("data.train_path"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named() {
    let o = rankseg(&["train", "--set", "train.epochz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epochz"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = rankseg(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.width"), "{}", stderr(&o));

    let o = rankseg(&["train", "--set", "selection.kappa=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("selection.kappa"), "{}", stderr(&o));
}

#[test]
fn unreadable_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    std::fs::write(&model, "{ not json").unwrap();
    let o = rankseg(&["dump-tau", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = rankseg(&["dump-tau", "--model", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--model"));
}

fn exists(dir: &Path, name: &str) -> bool {
    dir.join(name).is_file()
}

/// gen-data, train, eval, dump-tau and report on the default data layout,
/// with a short schedule.
#[test]
fn pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let sizes = ["--set", "data.train_size=48", "--set", "data.test_size=12"];
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap()];
    args.extend(sizes);
    let o = rankseg(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["train.rseg", "test.rseg", "dist.csv"] {
        assert!(exists(&data, f), "{f}");
    }
    let dist = std::fs::read_to_string(data.join("dist.csv")).unwrap();
    assert!(dist.starts_with("classes,cum_percent\n"));

    let train_path = format!("data.train_path={}", data.join("train.rseg").display());
    let test_path = format!("data.test_path={}", data.join("test.rseg").display());
    let o = rankseg(&[
        "train",
        "--set",
        &train_path,
        "--set",
        &test_path,
        "--set",
        "train.epochs=1",
        "--seed",
        "3",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report.json", "model.json", "tau.csv"] {
        assert!(exists(&run, f), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["config"]["train"]["seed"], 3);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    assert!(stderr(&o).contains("segmenter epoch"));

    let model = run.join("model.json");
    let eval_dir = dir.path().join("eval");
    let o = rankseg(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--set",
        "eval.kappa=8",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(metrics["selection"], "fixed_k=8");
    assert_eq!(metrics["mean_selected"], 8.0);

    let o = rankseg(&["eval", "--model", model.to_str().unwrap(), "--set", "model.dim=32"]);
    assert_eq!(o.status.code(), Some(1));

    let o = rankseg(&["dump-tau", "--model", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let tau = stdout(&o);
    assert!(tau.starts_with("rank,inverse_tau\n"));
    assert_eq!(tau.lines().count(), 65);
    assert_eq!(tau, std::fs::read_to_string(run.join("tau.csv")).unwrap());

    let o = rankseg(&["report", run.join("report.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mIoU"));
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = rankseg(&[
        "sweep",
        "--axis",
        "kappa=2,4",
        "--seeds",
        "0,1",
        "--workers",
        "2",
        "--set",
        "data.synthetic.num_classes=8",
        "--set",
        "data.synthetic.height=16",
        "--set",
        "data.synthetic.width=16",
        "--set",
        "data.synthetic.max_classes_per_image=2",
        "--set",
        "data.synthetic.class_count_distribution=[0.5, 0.5]",
        "--set",
        "selection.kappa=2",
        "--set",
        "data.train_size=8",
        "--set",
        "data.test_size=4",
        "--set",
        "model.dim=16",
        "--set",
        "model.depth=1",
        "--set",
        "train.epochs=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.starts_with("axis,value,seed,miou,map,tau_spearman,error\n"), "{csv}");
    assert!(exists(&out, "sweep.json"));
    assert!(exists(&out.join("kappa=4").join("seed=1"), "report.json"));

    let o = rankseg(&["sweep", "--axis", "depth=1,2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("depth"));
}

//! `rankseg`: generate data, train, evaluate, sweep and inspect runs.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2 for
//! failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rankseg::data::{distribution_report, distribution_report_csv, generate_range, write_dataset_file};
use rankseg::error::Error;
use rankseg::experiment::{
    ablation_sweep, dump_tau, load_datasets, run_experiment, write_sweep_csv, write_tau_csv, AnyModel,
    EvalSelectionKind, ExperimentConfig, RunReport, SelectionPolicy, SweepAxis, TEST_STREAM_OFFSET,
};

#[derive(Parser)]
#[command(name = "rankseg", version, about = "Rank-adaptive selected-label segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.rseg, test.rseg and dist.csv for the configured synthetic data.
    GenData(GenDataArgs),
    /// Train one model; writes report.json, model.json and tau.csv.
    Train(RunArgs),
    /// Score a saved model; writes eval.json.
    Eval(EvalArgs),
    /// Run an ablation axis over several seeds; writes sweep.csv and sweep.json.
    Sweep(SweepArgs),
    /// Print or write the learned (rank, 1/tau) table of a saved model.
    DumpTau(DumpTauArgs),
    /// Summarize one or more report.json files.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Data seed (sets data.synthetic.seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seed (sets train.seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved model (model.json from `train`).
    #[arg(long)]
    model: PathBuf,
    /// Overrides on top of the model's configuration, e.g.
    /// `--set eval.kappa=8` or `--set data.test_path=test.rseg`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Axis and values, e.g. `kappa=8,16,32` (axes: kappa, ml_weight, head_variant, tau_mode).
    #[arg(long)]
    axis: String,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Runs executed at once.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpTauArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory for tau.csv; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

/// Failure with its exit status.
enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> CliResult<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::Config(format!("--config: cannot read `{}`: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    Ok(ExperimentConfig::with_overrides(text.as_deref(), &overrides)?)
}

fn seed_override(key: &str, seed: Option<u64>) -> Vec<String> {
    seed.map(|s| format!("{key}={s}")).into_iter().collect()
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create `{}`", dir.display()))
        .map_err(Failure::Runtime)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents)
        .with_context(|| format!("cannot write `{}`", path.display()))
        .map_err(Failure::Runtime)
}

fn load_model(path: &Path) -> CliResult<AnyModel> {
    if !path.exists() {
        return Err(Failure::Config(format!("--model: `{}` does not exist", path.display())));
    }
    Ok(AnyModel::load(path).with_context(|| format!("cannot load model `{}`", path.display()))?)
}

fn gen_data(args: &GenDataArgs) -> CliResult {
    let cfg = load_config(&args.config, seed_override("data.synthetic.seed", args.seed))?;
    let synth = &cfg.data.synthetic;
    create_dir(&args.out)?;
    let train = generate_range(synth, 0, cfg.data.train_size)?;
    let test = generate_range(synth, TEST_STREAM_OFFSET, cfg.data.test_size)?;
    write_dataset_file(&train, &args.out.join("train.rseg"))?;
    write_dataset_file(&test, &args.out.join("test.rseg"))?;
    let mut csv = Vec::new();
    distribution_report_csv(&distribution_report(&train), &mut csv)?;
    write_file(&args.out.join("dist.csv"), csv)?;
    eprintln!(
        "wrote {} training and {} test images to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &RunArgs) -> CliResult {
    let cfg = load_config(&args.config, seed_override("train.seed", args.seed))?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    create_dir(&args.out)?;
    let quiet = args.quiet;
    let (model, report) = run_experiment(&cfg, &train_set, &test_set, &mut |phase, r| {
        if !quiet {
            eprintln!("{phase} epoch {:>3}: total {:.5} seg {:.5} ml {:.5}", r.index, r.total, r.seg, r.ml);
        }
    })?;
    report.save(&args.out.join("report.json"))?;
    model.save(&args.out.join("model.json"))?;
    let mut csv = Vec::new();
    write_tau_csv(&dump_tau(&model), &mut csv)?;
    write_file(&args.out.join("tau.csv"), csv)?;
    println!("{}", summary_line(&report));
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let cfg = ExperimentConfig::with_overrides(Some(&model.config().to_toml_string()), &args.overrides)?;
    let mut structural = cfg.clone();
    structural.eval = model.config().eval;
    structural.data.test_path = model.config().data.test_path.clone();
    structural.data.test_size = model.config().data.test_size;
    if structural != *model.config() {
        return Err(Failure::Config(
            "eval accepts only eval.* , data.test_path and data.test_size overrides".into(),
        ));
    }
    let (_, test_set) = load_datasets(&cfg)?;
    let policy = SelectionPolicy::for_evaluation(&cfg);
    if cfg.resolved_eval_selection() == EvalSelectionKind::Predicted && !cfg.has_multilabel() {
        eprintln!("note: model has no multi-label head; predicted selection falls back to class order");
    }
    let metrics = model.evaluate(&test_set, policy)?;
    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&metrics).context("cannot serialize metrics")?;
    write_file(&args.out.join("eval.json"), json)?;
    let map = metrics.map.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
    println!(
        "selection {}: mIoU {:.2}  mAP {map}  mean selected {:.2}",
        metrics.selection,
        100.0 * metrics.miou,
        metrics.mean_selected
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> CliResult {
    let cfg = load_config(&args.config, Vec::new())?;
    let axis = SweepAxis::parse(&args.axis)?;
    for v in &axis.values {
        axis.overrides(v)?;
    }
    if args.workers == 0 {
        return Err(Failure::Config("--workers must be positive".into()));
    }
    let (train_set, test_set) = load_datasets(&cfg)?;
    create_dir(&args.out)?;
    let result = ablation_sweep(&cfg, &axis, &args.seeds, args.workers, &train_set, &test_set, Some(&args.out))?;
    let mut csv = Vec::new();
    write_sweep_csv(&result.rows, &mut csv)?;
    write_file(&args.out.join("sweep.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&result).context("cannot serialize sweep")?;
    write_file(&args.out.join("sweep.json"), json)?;
    print!("{}", String::from_utf8_lossy(&csv));
    let failed = result.rows.iter().filter(|r| r.error.is_some() && r.seed != "mean").count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see the error column");
    }
    Ok(())
}

fn dump_tau_cmd(args: &DumpTauArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let mut csv = Vec::new();
    write_tau_csv(&dump_tau(&model), &mut csv)?;
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("tau.csv"), csv)
        }
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
    }
}

fn summary_line(r: &RunReport) -> String {
    let map = r.metrics.map.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
    let rho = r.tau_rank_spearman.map_or("-".to_string(), |s| format!("{s:.3}"));
    format!(
        "{} seed {}: mIoU {:.2}  mAP {map}  tau spearman {rho}  eval {}  {:.1}s",
        r.config.mode,
        r.seed,
        100.0 * r.metrics.miou,
        r.metrics.selection,
        r.wall_clock_seconds
    )
}

fn report(args: &ReportArgs) -> CliResult {
    for path in &args.reports {
        if !path.exists() {
            return Err(Failure::Config(format!("report `{}` does not exist", path.display())));
        }
        let r = RunReport::load(path).with_context(|| format!("cannot read report `{}`", path.display()))?;
        println!("{}: {}", path.display(), summary_line(&r));
        println!(
            "  params {} (backbone {}, ml head {}, seg head {}, separate ml model {})  MACs/image {}",
            r.cost.params_total,
            r.cost.params_backbone,
            r.cost.params_ml_head,
            r.cost.params_seg_head,
            r.cost.params_multilabel_model,
            r.cost.macs_per_image
        );
        if let Some(last) = r.epochs.last() {
            println!("  final train loss {:.5} (seg {:.5}, ml {:.5})", last.total, last.seg, last.ml);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::DumpTau(a) => dump_tau_cmd(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

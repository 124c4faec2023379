use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::RunReport;
use super::run_experiment;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// One swept setting and its values, e.g. `kappa=8,16,32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<String>,
}

const AXES: &[&str] = &["kappa", "ml_weight", "head_variant", "tau_mode"];

impl SweepAxis {
    pub fn parse(text: &str) -> Result<Self> {
        let (name, values) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis `{text}` is not of the form name=v1,v2")))?;
        let axis = SweepAxis {
            name: name.trim().to_string(),
            values: values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
        };
        if !AXES.contains(&axis.name.as_str()) {
            return Err(Error::Config(format!(
                "unknown sweep axis `{}` (expected one of {})",
                axis.name,
                AXES.join(", ")
            )));
        }
        if axis.values.is_empty() {
            return Err(Error::Config(format!("sweep axis `{}` has no values", axis.name)));
        }
        Ok(axis)
    }

    /// Configuration overrides selecting `value` on this axis.
    pub fn overrides(&self, value: &str) -> Result<Vec<String>> {
        Ok(match self.name.as_str() {
            "kappa" => vec![format!("selection.kappa={value}")],
            "ml_weight" => vec![format!("loss.ml_weight={value}")],
            "head_variant" => vec![format!("head_variant=\"{value}\"")],
            "tau_mode" => match value {
                "shared" => vec!["mode=\"MT_LS\"".into()],
                "rank_adaptive" => vec!["mode=\"MT_LS_RA\"".into()],
                other => {
                    return Err(Error::Config(format!(
                        "tau_mode must be `shared` or `rank_adaptive`, got `{other}`"
                    )))
                }
            },
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        })
    }
}

/// One CSV line: a single run, or the mean over seeds when `seed` is `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: String,
    pub miou: Option<f64>,
    pub map: Option<f64>,
    pub tau_spearman: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    /// Run rows in `(value, seed)` order, each value followed by its mean row.
    pub rows: Vec<SweepRow>,
    /// Reports of the runs in `(value, seed)` order; `None` where a run failed.
    pub reports: Vec<Option<RunReport>>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every `(value, seed)` pair of `axis` on top of `base`, with up to
/// `workers` runs at once. A failing run is recorded in its row and does not
/// stop the others. With `out_dir`, each run writes its report to
/// `out_dir/<axis>=<value>/seed=<seed>/report.json`.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: &SweepAxis,
    seeds: &[u64],
    workers: usize,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    let base_toml = base.to_toml_string();
    let jobs: Vec<(usize, String, u64)> = axis
        .values
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| seeds.iter().map(move |&s| (vi, v.clone(), s)))
        .collect();
    let results: Mutex<Vec<Option<std::result::Result<RunReport, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let run_one = |value: &str, seed: u64| -> Result<RunReport> {
        let mut overrides = axis.overrides(value)?;
        overrides.push(format!("train.seed={seed}"));
        let cfg = ExperimentConfig::with_overrides(Some(&base_toml), &overrides)?;
        let (_, report) = run_experiment(&cfg, train, test, &mut |_, _| {})?;
        if let Some(dir) = out_dir {
            let dir = dir.join(format!("{}={value}", axis.name)).join(format!("seed={seed}"));
            std::fs::create_dir_all(&dir)?;
            report.save(&dir.join("report.json"))?;
        }
        Ok(report)
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, value, seed)) = jobs.get(j) else {
                    break;
                };
                let outcome = run_one(value, *seed).map_err(|e| e.to_string());
                results.lock().expect("no worker panics while holding the lock")[j] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("workers finished");

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (vi, value) in axis.values.iter().enumerate() {
        let first = rows.len();
        for (j, (jvi, _, seed)) in jobs.iter().enumerate() {
            if *jvi != vi {
                continue;
            }
            let row = match results[j].as_ref().expect("every job ran") {
                Ok(r) => {
                    reports.push(Some(r.clone()));
                    SweepRow {
                        axis: axis.name.clone(),
                        value: value.clone(),
                        seed: seed.to_string(),
                        miou: Some(r.metrics.miou),
                        map: r.metrics.map,
                        tau_spearman: r.tau_rank_spearman,
                        error: None,
                    }
                }
                Err(e) => {
                    reports.push(None);
                    SweepRow {
                        axis: axis.name.clone(),
                        value: value.clone(),
                        seed: seed.to_string(),
                        miou: None,
                        map: None,
                        tau_spearman: None,
                        error: Some(e.clone()),
                    }
                }
            };
            rows.push(row);
        }
        let runs = &rows[first..];
        let failed = runs.iter().filter(|r| r.error.is_some()).count();
        let mean_row = SweepRow {
            axis: axis.name.clone(),
            value: value.clone(),
            seed: "mean".into(),
            miou: mean(runs.iter().map(|r| r.miou)),
            map: mean(runs.iter().map(|r| r.map)),
            tau_spearman: mean(runs.iter().map(|r| r.tau_spearman)),
            error: (failed > 0).then(|| format!("{failed} of {} runs failed", runs.len())),
        };
        rows.push(mean_row);
    }
    Ok(SweepResult {
        axis: axis.clone(),
        seeds: seeds.to_vec(),
        rows,
        reports,
    })
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

//! Training, evaluation, sweeps and reporting.

mod config;
mod eval;
mod model;
mod report;
mod sweep;
mod tau;
mod train;

pub use config::{
    is_known_key, CategorySource, DataConfig, EvalConfig, EvalSelectionKind, ExperimentConfig, Mode, ModelConfig,
    OracleMode, Scheme, SelectionConfig, SelectionKind, TrainConfig,
};
pub use eval::{evaluate, predict_image, EvalMetrics, ImagePrediction};
pub use model::{ModelFile, Network, NetworkRole, SavedParam, SegHead, SelectionPolicy, TrainedModel};
pub use report::{spearman, tau_rank_correlation, CostReport, LossRecord, RunReport};
pub use sweep::{ablation_sweep, read_sweep_csv, write_sweep_csv, SweepAxis, SweepResult, SweepRow};
pub use tau::{dump_tau, read_tau_csv, write_tau_csv, TauRow};
pub use train::{check_dataset, train, train_with_progress};

use std::path::Path;

use crate::data::{generate_range, read_dataset_file, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Stream offset of the first test sample, far above any training index.
pub const TEST_STREAM_OFFSET: u64 = 1 << 40;

fn read_configured(path: &Path, key: &str) -> Result<Dataset> {
    read_dataset_file(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{key}: cannot read `{}`: {io}", path.display())),
        other => other,
    })
}

/// Training and test splits: read from the configured files, or generated.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let synth = &cfg.data.synthetic;
    let train = match &cfg.data.train_path {
        Some(p) => read_configured(p, "data.train_path")?,
        None => generate_range(synth, 0, cfg.data.train_size)?,
    };
    let test = match &cfg.data.test_path {
        Some(p) => read_configured(p, "data.test_path")?,
        None => generate_range(synth, TEST_STREAM_OFFSET, cfg.data.test_size)?,
    };
    check_dataset(cfg, &train, "data.train_path")?;
    check_dataset(cfg, &test, "data.test_path")?;
    Ok((train, test))
}

/// A trained model at either precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(TrainedModel<f32>),
    F64(TrainedModel<f64>),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

impl AnyModel {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.train.precision {
            Precision::F32 => AnyModel::F32(TrainedModel::init(cfg)?),
            Precision::F64 => AnyModel::F64(TrainedModel::init(cfg)?),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        dispatch!(self, m => &m.config)
    }

    pub fn evaluate(&self, dataset: &Dataset, policy: SelectionPolicy) -> Result<EvalMetrics> {
        dispatch!(self, m => evaluate(m, dataset, policy))
    }

    pub fn inverse_tau(&self) -> (Vec<f64>, bool) {
        dispatch!(self, m => m.inverse_tau())
    }

    pub fn to_file(&self) -> ModelFile {
        dispatch!(self, m => m.to_file())
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        Ok(match file.precision {
            Precision::F32 => AnyModel::F32(TrainedModel::from_file(file)?),
            Precision::F64 => AnyModel::F64(TrainedModel::from_file(file)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ModelFile::load(path)?)
    }
}

/// Trains at the configured precision.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_epoch: &mut dyn FnMut(&str, &LossRecord),
) -> Result<(AnyModel, RunReport)> {
    Ok(match cfg.train.precision {
        Precision::F32 => {
            let (m, r) = train_with_progress::<f32>(cfg, train_set, test_set, on_epoch)?;
            (AnyModel::F32(m), r)
        }
        Precision::F64 => {
            let (m, r) = train_with_progress::<f64>(cfg, train_set, test_set, on_epoch)?;
            (AnyModel::F64(m), r)
        }
    })
}

#[cfg(test)]
mod tests;

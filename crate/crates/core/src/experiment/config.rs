//! Experiment configuration: TOML file plus dotted `key=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::head::MultiLabelHeadVariant;
use crate::loss::{AsymmetricLossParams, LossWeights};
use crate::nn::BackboneConfig;
use crate::tensor::Precision;

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Segmenter alone: complete-label classification, no multi-label loss.
    Baseline,
    /// Adds the multi-label head and loss, still classifying over all classes.
    Mt,
    /// Adds label selection with one shared temperature.
    MtLs,
    /// Adds a learnable temperature per selection rank.
    MtLsRa,
}

impl Mode {
    pub fn uses_multilabel(self) -> bool {
        self != Mode::Baseline
    }

    pub fn selects_labels(self) -> bool {
        matches!(self, Mode::MtLs | Mode::MtLsRa)
    }

    pub fn rank_adaptive(self) -> bool {
        self == Mode::MtLsRa
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "BASELINE",
            Mode::Mt => "MT",
            Mode::MtLs => "MT_LS",
            Mode::MtLsRa => "MT_LS_RA",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    /// One shared backbone trained on both tasks.
    Joint,
    /// A separately trained, then frozen, multi-label model drives selection.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OracleMode {
    None,
    /// Ground-truth label sets replace predictions at evaluation only.
    GtEval,
    /// Ground-truth label sets are used for training and evaluation.
    GtTrainEval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Fixed,
    Dynamic,
}

/// Which category embeddings enter the pixel classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategorySource {
    /// The raw category table rows.
    Original,
    /// The rows after the multi-label transform.
    Refined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub mode: SelectionKind,
    pub kappa: usize,
    pub threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: SelectionKind::Fixed,
            kappa: 16,
            threshold: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub ml_head_lr_multiplier: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Epochs of the standalone multi-label model in the independent scheme.
    pub independent_ml_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            base_lr: 3e-4,
            ml_head_lr_multiplier: 1.0,
            precision: Precision::F32,
            seed: 0,
            independent_ml_epochs: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Encoder layers of the pixel-vs-category transform.
    pub psi_layers: usize,
    /// Pooling factor applied to pixel tokens inside the transformer
    /// multi-label heads.
    pub ml_downsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            psi_layers: 2,
            ml_downsample: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Dataset files; when absent the split is generated from `synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_size: 1000,
            test_size: 200,
            train_path: None,
            test_path: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Label set used when scoring a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSelectionKind {
    /// Predicted selection for selecting modes, complete otherwise; ground
    /// truth under either oracle.
    Auto,
    Predicted,
    OracleGt,
    Complete,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub selection: EvalSelectionKind,
    /// Evaluation-time kappa; defaults to the training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selection: EvalSelectionKind::Auto,
            kappa: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub scheme: Scheme,
    pub oracle: OracleMode,
    pub head_variant: MultiLabelHeadVariant,
    pub psi_category_source: CategorySource,
    pub selection: SelectionConfig,
    pub loss: LossWeights,
    pub asl: AsymmetricLossParams,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::MtLsRa,
            scheme: Scheme::Joint,
            oracle: OracleMode::None,
            head_variant: MultiLabelHeadVariant::TranEnc1,
            psi_category_source: CategorySource::Original,
            selection: SelectionConfig::default(),
            loss: LossWeights::default(),
            asl: AsymmetricLossParams::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Keys that are valid although the default configuration leaves them unset.
const OPTIONAL_KEYS: &[&str] = &["data.train_path", "data.test_path", "eval.kappa"];

impl ExperimentConfig {
    pub fn num_classes(&self) -> usize {
        self.data.synthetic.num_classes
    }

    pub fn ignore_index(&self) -> u16 {
        self.data.synthetic.ignore_index()
    }

    pub fn backbone(&self) -> BackboneConfig {
        let s = &self.data.synthetic;
        BackboneConfig {
            channels: s.channels,
            height: s.height,
            width: s.width,
            patch: self.model.patch,
            dim: self.model.dim,
            depth: self.model.depth,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    /// Whether training classifies over a selected subset.
    pub fn trains_with_selection(&self) -> bool {
        self.mode.selects_labels() || self.oracle == OracleMode::GtTrainEval
    }

    /// Whether the model carries (and trains) a multi-label head.
    pub fn has_multilabel(&self) -> bool {
        self.mode.uses_multilabel()
    }

    /// Selection actually used at evaluation once `Auto` is resolved.
    pub fn resolved_eval_selection(&self) -> EvalSelectionKind {
        match self.eval.selection {
            EvalSelectionKind::Auto => match self.oracle {
                OracleMode::GtEval | OracleMode::GtTrainEval => EvalSelectionKind::OracleGt,
                OracleMode::None if self.mode.selects_labels() => EvalSelectionKind::Predicted,
                OracleMode::None => EvalSelectionKind::Complete,
            },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.data.synthetic.validate_for_patch(self.model.patch)?;
        self.backbone().validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.loss.validate()?;
        self.asl.validate()?;
        let k = self.num_classes();
        if self.selection.kappa == 0 || self.selection.kappa > k {
            return bad(format!("selection.kappa must be in 1..={k}, got {}", self.selection.kappa));
        }
        if let Some(kappa) = self.eval.kappa {
            if kappa == 0 || kappa > k {
                return bad(format!("eval.kappa must be in 1..={k}, got {kappa}"));
            }
        }
        if !(self.selection.threshold > 0.0 && self.selection.threshold < 1.0) {
            return bad(format!("selection.threshold must be in (0, 1), got {}", self.selection.threshold));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.train.base_lr > 0.0) || !(self.train.ml_head_lr_multiplier > 0.0) {
            return bad("train.base_lr and train.ml_head_lr_multiplier must be positive".into());
        }
        if self.model.ml_downsample == 0 {
            return bad("model.ml_downsample must be positive".into());
        }
        let (gh, gw) = self.backbone().grid();
        if self.head_variant != MultiLabelHeadVariant::GapLinear
            && (gh % self.model.ml_downsample != 0 || gw % self.model.ml_downsample != 0)
        {
            return bad(format!(
                "model.ml_downsample {} does not divide the {gh}x{gw} token grid",
                self.model.ml_downsample
            ));
        }
        if self.scheme == Scheme::Independent && !self.has_multilabel() {
            return bad("scheme INDEPENDENT needs a mode with a multi-label head".into());
        }
        if self.psi_category_source == CategorySource::Refined
            && (self.scheme == Scheme::Independent || !self.has_multilabel())
        {
            return bad("psi_category_source = \"refined\" needs a joint model with a multi-label head".into());
        }
        if self.resolved_eval_selection() == EvalSelectionKind::Predicted
            && !self.has_multilabel()
            && self.eval.kappa.unwrap_or(k) != k
            && self.selection.mode == SelectionKind::Fixed
        {
            return bad("predicted selection below K needs a multi-label head".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        check_known_keys(&value, &default_tree(), "")?;
        Self::from_tree(value)
    }

    /// Applies `key=value` overrides on top of `base` (a parsed file, or the
    /// defaults). Values are parsed as TOML, falling back to a bare string.
    pub fn with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut tree = match text {
            Some(t) => {
                let v = toml::Value::Table(
                    t.parse::<toml::Table>()
                        .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?,
                );
                check_known_keys(&v, &default_tree(), "")?;
                v
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            let key = key.trim();
            if !is_known_key(key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            set_path(&mut tree, key, parse_value(raw.trim()))?;
        }
        Self::from_tree(tree)
    }

    fn from_tree(tree: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration always serializes")
    }
}

fn default_tree() -> toml::Value {
    toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

fn lookup<'a>(tree: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(tree, |node, part| node.get(part))
}

/// Whether `key` names a leaf setting.
pub fn is_known_key(key: &str) -> bool {
    if OPTIONAL_KEYS.contains(&key) {
        return true;
    }
    matches!(lookup(&default_tree(), key), Some(v) if !v.is_table())
}

fn check_known_keys(value: &toml::Value, reference: &toml::Value, prefix: &str) -> Result<()> {
    let Some(table) = value.as_table() else {
        return Ok(());
    };
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            Some(r) if r.is_table() => {
                if !v.is_table() {
                    return Err(Error::Config(format!("key `{path}` must be a table")));
                }
                check_known_keys(v, r, &path)?;
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => return Err(Error::Config(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key `{key}` crosses a non-table value")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("key `{key}` crosses a non-table value")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml_str("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("train.epochz"), "{err}");
        let err = ExperimentConfig::with_overrides(None, &["model.width=3".into()]).unwrap_err();
        assert!(err.to_string().contains("model.width"), "{err}");
        let err = ExperimentConfig::from_toml_str("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_apply_on_top_of_the_file() {
        let cfg = ExperimentConfig::with_overrides(
            Some("mode = \"MT\"\n[train]\nepochs = 3\n"),
            &[
                "train.epochs=5".into(),
                "selection.kappa=8".into(),
                "head_variant=gap_linear".into(),
                "data.train_path=/tmp/x.rseg".into(),
                "data.synthetic.class_count_distribution=[0.5, 0.5]".into(),
                "data.synthetic.max_classes_per_image=2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Mt);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.selection.kappa, 8);
        assert_eq!(cfg.head_variant, MultiLabelHeadVariant::GapLinear);
        assert_eq!(cfg.data.train_path, Some(PathBuf::from("/tmp/x.rseg")));
        assert_eq!(cfg.data.synthetic.max_classes_per_image, 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "selection.kappa=0",
            "selection.kappa=65",
            "selection.threshold=1.5",
            "train.batch_size=0",
            "model.heads=3",
            "loss.ml_weight=-1",
            "mode=\"FOO\"",
        ] {
            let err = ExperimentConfig::with_overrides(None, &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        let err = ExperimentConfig::with_overrides(None, &["scheme=INDEPENDENT".into(), "mode=BASELINE".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn eval_selection_resolution() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolved_eval_selection(), EvalSelectionKind::Predicted);
        cfg.mode = Mode::Mt;
        assert_eq!(cfg.resolved_eval_selection(), EvalSelectionKind::Complete);
        cfg.oracle = OracleMode::GtEval;
        assert_eq!(cfg.resolved_eval_selection(), EvalSelectionKind::OracleGt);
        assert!(!cfg.trains_with_selection());
        cfg.oracle = OracleMode::GtTrainEval;
        assert!(cfg.trains_with_selection());
    }
}

//! Model assembly, selection policy and persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CategorySource, EvalSelectionKind, ExperimentConfig, OracleMode, Scheme, SelectionKind};
use crate::error::{Error, Result};
use crate::head::{
    multilabel_forward, rank_adaptive_pixel_classify, top_k_select, CategoryTable, MultiLabelHead, MultiLabelOutput,
    PixelClassification, RankTemperatures, SelectionRequest, SelectionResult,
};
use crate::nn::{BilinearUpsampler, EncoderLayer, PatchBackbone};
use crate::tensor::{ParamGroup, ParamStore, Precision, Real, Tape, Tensor, Var};

/// RNG streams derived from the training seed.
pub(crate) const INIT_STREAM: u64 = 0;
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const ML_INIT_STREAM: u64 = 2;
pub(crate) const ML_SHUFFLE_STREAM: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pixel-classification parts of a segmenter.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub temps: RankTemperatures,
    pub psi: Vec<EncoderLayer>,
    pub upsampler: BilinearUpsampler,
}

/// Which parts a network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkRole {
    /// Shared backbone with both heads.
    Joint,
    /// Segmentation head only.
    Segmenter,
    /// Multi-label head only (the first model of the independent scheme).
    MultiLabel,
}

#[derive(Debug)]
pub struct Network<T> {
    pub store: ParamStore<T>,
    pub role: NetworkRole,
    pub backbone: PatchBackbone,
    pub table: CategoryTable,
    pub ml_head: Option<MultiLabelHead>,
    pub seg: Option<SegHead>,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            store: self.store.clone(),
            role: self.role,
            backbone: self.backbone.clone(),
            table: self.table.clone(),
            ml_head: self.ml_head.clone(),
            seg: self.seg.clone(),
        }
    }
}

impl<T: Real> Network<T> {
    pub fn new(cfg: &ExperimentConfig, role: NetworkRole, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = &cfg.model;
        let mut store = ParamStore::new();
        let backbone = PatchBackbone::new(&mut store, "backbone", cfg.backbone(), rng)?;
        let with_ml = role != NetworkRole::Segmenter;
        let table = CategoryTable::new(&mut store, "categories", cfg.num_classes(), m.dim, with_ml, rng)?;
        let mlp_hidden = m.dim * m.mlp_ratio;
        let ml_head = if with_ml {
            Some(MultiLabelHead::new(
                &mut store,
                "ml_head",
                cfg.head_variant,
                m.dim,
                m.heads,
                mlp_hidden,
                m.ml_downsample,
                rng,
            )?)
        } else {
            None
        };
        let seg = if role != NetworkRole::MultiLabel {
            let temps = RankTemperatures::new(&mut store, "seg_head.tau", cfg.num_classes(), !cfg.mode.rank_adaptive())?;
            let psi = (0..m.psi_layers)
                .map(|i| {
                    EncoderLayer::new(
                        &mut store,
                        &format!("seg_head.psi{i}"),
                        m.dim,
                        m.heads,
                        mlp_hidden,
                        ParamGroup::SegHead,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let s = &cfg.data.synthetic;
            let upsampler = BilinearUpsampler::new(cfg.backbone().grid(), (s.height, s.width));
            Some(SegHead { temps, psi, upsampler })
        } else {
            None
        };
        Ok(Network {
            store,
            role,
            backbone,
            table,
            ml_head,
            seg,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.backbone.cfg.grid()
    }

    pub fn embed(&self, tape: &mut Tape<T>, image: &[f32]) -> Result<Var> {
        let image: Vec<T> = image.iter().map(|&v| T::of(v as f64)).collect();
        Ok(self.backbone.patch_embed(tape, &self.store, &image)?)
    }

    pub fn multilabel(&self, tape: &mut Tape<T>, tokens: Var) -> Result<MultiLabelOutput> {
        let head = self
            .ml_head
            .as_ref()
            .ok_or_else(|| Error::Config("network has no multi-label head".into()))?;
        multilabel_forward(tape, &self.store, tokens, self.grid(), &self.table, head)
    }

    /// Pixel probabilities over `sel` (pixel resolution). With `shared`, the
    /// rank-0 temperature is used at every rank.
    pub fn classify(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        categories: Var,
        sel: &SelectionResult,
        shared: bool,
    ) -> Result<PixelClassification> {
        let seg = self
            .seg
            .as_ref()
            .ok_or_else(|| Error::Config("network has no segmentation head".into()))?;
        let temps = if shared { seg.temps.as_shared() } else { seg.temps.clone() };
        rank_adaptive_pixel_classify(
            tape,
            &self.store,
            tokens,
            categories,
            sel,
            &temps,
            &seg.psi,
            Some(&seg.upsampler),
        )
    }

    /// Presence probabilities of one image, or `None` without a head.
    pub fn predict_presence(&self, image: &[f32]) -> Result<Option<Vec<f64>>> {
        if self.ml_head.is_none() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let tokens = self.embed(&mut tape, image)?;
        let out = self.multilabel(&mut tape, tokens)?;
        Ok(Some(tape.value(out.probs).iter().map(|v| v.f64()).collect()))
    }

    pub fn inverse_tau(&self) -> Option<(Vec<f64>, bool)> {
        self.seg
            .as_ref()
            .map(|s| (s.temps.values(&self.store), s.temps.shared))
    }
}

/// How the label subset of an image is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionPolicy {
    Complete,
    Fixed(usize),
    Dynamic(f64),
    OracleGt,
}

impl SelectionPolicy {
    pub fn label(&self) -> String {
        match self {
            SelectionPolicy::Complete => "complete".into(),
            SelectionPolicy::Fixed(k) => format!("fixed_k={k}"),
            SelectionPolicy::Dynamic(t) => format!("dynamic_threshold={t}"),
            SelectionPolicy::OracleGt => "oracle_gt".into(),
        }
    }

    /// Policy used while training under `cfg`.
    pub fn for_training(cfg: &ExperimentConfig) -> Self {
        if cfg.oracle == OracleMode::GtTrainEval {
            SelectionPolicy::OracleGt
        } else if cfg.mode.selects_labels() {
            Self::predicted(cfg, cfg.selection.kappa)
        } else {
            SelectionPolicy::Complete
        }
    }

    /// Policy used at evaluation under `cfg`.
    pub fn for_evaluation(cfg: &ExperimentConfig) -> Self {
        match cfg.resolved_eval_selection() {
            EvalSelectionKind::Complete => SelectionPolicy::Complete,
            EvalSelectionKind::OracleGt => SelectionPolicy::OracleGt,
            _ => Self::predicted(cfg, cfg.eval.kappa.unwrap_or(cfg.selection.kappa)),
        }
    }

    fn predicted(cfg: &ExperimentConfig, kappa: usize) -> Self {
        match cfg.selection.mode {
            SelectionKind::Fixed => SelectionPolicy::Fixed(kappa),
            SelectionKind::Dynamic => SelectionPolicy::Dynamic(cfg.selection.threshold),
        }
    }

    /// Selection for one image. Without presence scores every class ranks
    /// equally, so the order falls back to class ids.
    pub fn select(&self, probs: Option<&[f64]>, target: &[bool]) -> Result<SelectionResult> {
        let k = target.len();
        let uniform;
        let probs = match probs {
            Some(p) => p,
            None => {
                uniform = vec![0.5; k];
                &uniform
            }
        };
        match *self {
            SelectionPolicy::Complete => Ok(SelectionResult::identity(k)),
            SelectionPolicy::Fixed(kappa) => top_k_select(probs, SelectionRequest::FixedK(kappa)),
            SelectionPolicy::Dynamic(t) => top_k_select(probs, SelectionRequest::DynamicThreshold(t)),
            SelectionPolicy::OracleGt => top_k_select(probs, SelectionRequest::OracleGt(target)),
        }
    }

    pub fn is_complete(&self) -> bool {
        *self == SelectionPolicy::Complete
    }
}

/// A trained system: the segmenter (joint or standalone) and, in the
/// independent scheme, the frozen multi-label model feeding it.
#[derive(Debug)]
pub struct TrainedModel<T> {
    pub config: ExperimentConfig,
    pub segmenter: Network<T>,
    pub multilabel: Option<Network<T>>,
}

impl<T: Real> Clone for TrainedModel<T> {
    fn clone(&self) -> Self {
        TrainedModel {
            config: self.config.clone(),
            segmenter: self.segmenter.clone(),
            multilabel: self.multilabel.clone(),
        }
    }
}

impl<T: Real> TrainedModel<T> {
    /// Freshly initialized model for `config`.
    pub fn init(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.train.seed, INIT_STREAM);
        let (segmenter, multilabel) = match config.scheme {
            Scheme::Joint => {
                let role = if config.has_multilabel() {
                    NetworkRole::Joint
                } else {
                    NetworkRole::Segmenter
                };
                (Network::new(config, role, &mut rng)?, None)
            }
            Scheme::Independent => {
                let seg = Network::new(config, NetworkRole::Segmenter, &mut rng)?;
                let mut ml_rng = stream_rng(config.train.seed, ML_INIT_STREAM);
                let ml = Network::new(config, NetworkRole::MultiLabel, &mut ml_rng)?;
                (seg, Some(ml))
            }
        };
        Ok(TrainedModel {
            config: config.clone(),
            segmenter,
            multilabel,
        })
    }

    /// The network whose multi-label head produces presence scores.
    pub fn presence_network(&self) -> Option<&Network<T>> {
        match &self.multilabel {
            Some(ml) => Some(ml),
            None if self.segmenter.ml_head.is_some() => Some(&self.segmenter),
            None => None,
        }
    }

    /// Category embeddings entering the pixel classifier.
    pub(crate) fn categories(&self, tape: &mut Tape<T>, ml_out: Option<&MultiLabelOutput>) -> Var {
        match (self.config.psi_category_source, ml_out) {
            (CategorySource::Refined, Some(out)) => out.refined,
            _ => self.segmenter.table.embeddings(tape, &self.segmenter.store),
        }
    }

    pub fn inverse_tau(&self) -> (Vec<f64>, bool) {
        self.segmenter.inverse_tau().expect("a segmenter always has a segmentation head")
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.into(),
            precision: T::PRECISION,
            config: self.config.clone(),
            segmenter: save_params(&self.segmenter.store),
            multilabel: self.multilabel.as_ref().map(|m| save_params(&m.store)),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unknown model format `{}`", file.format)));
        }
        let mut model = Self::init(&file.config)?;
        load_params(&mut model.segmenter.store, &file.segmenter)?;
        match (&mut model.multilabel, &file.multilabel) {
            (Some(net), Some(params)) => load_params(&mut net.store, params)?,
            (None, None) => {}
            _ => return Err(Error::Format("multi-label model does not match the scheme".into())),
        }
        Ok(model)
    }
}

const MODEL_FORMAT: &str = "rankseg-model-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON model file: configuration plus every parameter by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub precision: Precision,
    pub config: ExperimentConfig,
    pub segmenter: Vec<SavedParam>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multilabel: Option<Vec<SavedParam>>,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

fn save_params<T: Real>(store: &ParamStore<T>) -> Vec<SavedParam> {
    store
        .iter()
        .map(|(_, p)| SavedParam {
            name: p.name().to_string(),
            shape: p.tensor.shape().to_vec(),
            data: p.tensor.to_f64_vec(),
        })
        .collect()
}

fn load_params<T: Real>(store: &mut ParamStore<T>, saved: &[SavedParam]) -> Result<()> {
    if saved.len() != store.len() {
        return Err(Error::Format(format!(
            "model file has {} parameters, configuration expects {}",
            saved.len(),
            store.len()
        )));
    }
    for s in saved {
        let id = store
            .id(&s.name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter `{}`", s.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != s.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                s.name,
                s.shape,
                p.tensor.shape()
            )));
        }
        p.tensor = Tensor::from_f64(&s.shape, &s.data)?.with_requires_grad(true);
    }
    Ok(())
}

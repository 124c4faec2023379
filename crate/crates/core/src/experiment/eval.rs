use serde::{Deserialize, Serialize};

use super::model::{SelectionPolicy, TrainedModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::{predict_classes, SelectionResult};
use crate::metrics::{mean_average_precision, ConfusionMatrix};
use crate::tensor::{Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub selection: String,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Multi-label mAP, when the model predicts presence.
    pub map: Option<f64>,
    pub pixel_accuracy: f64,
    /// Average size of the selected label set.
    pub mean_selected: f64,
    /// Share of labelled pixels whose class was left out of the selection.
    pub excluded_pixel_rate: f64,
}

pub struct ImagePrediction {
    /// Original class id of every pixel.
    pub classes: Vec<u16>,
    pub selection: SelectionResult,
    /// Presence probabilities that drove the selection, if any.
    pub presence: Option<Vec<f64>>,
    /// Multiply-accumulates spent on this image by the segmenter.
    pub macs: u64,
}

/// Per-pixel predictions of one image under `policy`. `presence` supplies
/// scores from a separate multi-label model.
pub fn predict_image<T: Real>(
    model: &TrainedModel<T>,
    image: &[f32],
    target: &[bool],
    policy: SelectionPolicy,
    presence: Option<&[f64]>,
) -> Result<ImagePrediction> {
    let net = &model.segmenter;
    let mut tape = Tape::new();
    let tokens = net.embed(&mut tape, image)?;
    let joint_ml = if model.multilabel.is_none() && net.ml_head.is_some() {
        Some(net.multilabel(&mut tape, tokens)?)
    } else {
        None
    };
    let joint_probs: Option<Vec<f64>> = joint_ml
        .as_ref()
        .map(|out| tape.value(out.probs).iter().map(|v| v.f64()).collect());
    let presence = presence.map(|p| p.to_vec()).or(joint_probs);
    let sel = policy.select(presence.as_deref(), target)?;
    let shared = policy.is_complete() || !model.config.mode.rank_adaptive();
    let categories = model.categories(&mut tape, joint_ml.as_ref());
    let out = net.classify(&mut tape, tokens, categories, &sel, shared)?;
    Ok(ImagePrediction {
        classes: predict_classes(&tape, out.z, &sel),
        selection: sel,
        presence,
        macs: tape.macs(),
    })
}

/// Scores `model` on `dataset`. Pixels whose class the selection left out are
/// necessarily mispredicted and count against mIoU.
pub fn evaluate<T: Real>(model: &TrainedModel<T>, dataset: &Dataset, policy: SelectionPolicy) -> Result<EvalMetrics> {
    let k = dataset.num_classes;
    let ignore = dataset.ignore_index();
    let mut cm = ConfusionMatrix::new(k);
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    let mut selected = 0usize;
    let mut excluded = 0usize;
    let mut labelled = 0usize;
    for sample in &dataset.samples {
        let presence = match &model.multilabel {
            Some(ml) => ml.predict_presence(&sample.image)?,
            None => None,
        };
        let p = predict_image(model, &sample.image, &sample.multilabel, policy, presence.as_deref())?;
        let sel = p.selection;
        cm.accumulate(&p.classes, &sample.seg_map, ignore)?;
        selected += sel.len();
        let positions = sel.positions(k);
        for &g in &sample.seg_map {
            if g != ignore {
                labelled += 1;
                if positions[g as usize].is_none() {
                    excluded += 1;
                }
            }
        }
        if let Some(probs) = p.presence {
            scores.extend(probs);
            targets.extend_from_slice(&sample.multilabel);
        }
    }
    let per_class_iou = cm.per_class_iou();
    let miou = if dataset.is_empty() { 0.0 } else { cm.miou()? };
    let map = if scores.is_empty() {
        None
    } else {
        match mean_average_precision(&scores, &targets, k) {
            Ok(v) => Some(v),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        }
    };
    let correct: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    let n = dataset.len().max(1) as f64;
    Ok(EvalMetrics {
        selection: policy.label(),
        miou,
        per_class_iou,
        map,
        pixel_accuracy: if labelled == 0 { 0.0 } else { correct as f64 / labelled as f64 },
        mean_selected: selected as f64 / n,
        excluded_pixel_rate: if labelled == 0 { 0.0 } else { excluded as f64 / labelled as f64 },
    })
}

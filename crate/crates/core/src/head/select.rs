use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    FixedK,
    DynamicThreshold,
    OracleGt,
}

/// How to pick the label subset of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionRequest<'a> {
    FixedK(usize),
    DynamicThreshold(f64),
    OracleGt(&'a [bool]),
}

/// Selected category ids in rank order (rank 0 = most confident).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub mode: SelectionMode,
}

impl SelectionResult {
    /// All `k` classes in id order, as used by complete-label classification.
    pub fn identity(k: usize) -> Self {
        SelectionResult {
            indices: (0..k).collect(),
            scores: vec![0.0; k],
            mode: SelectionMode::FixedK,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `position[class]` = rank of that class in the selection, if selected.
    pub fn positions(&self, num_classes: usize) -> Vec<Option<usize>> {
        let mut pos = vec![None; num_classes];
        for (rank, &c) in self.indices.iter().enumerate() {
            if c < num_classes {
                pos[c] = Some(rank);
            }
        }
        pos
    }

    /// Same classes in the order `order[r]` = old rank placed at rank `r`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        SelectionResult {
            indices: order.iter().map(|&r| self.indices[r]).collect(),
            scores: order.iter().map(|&r| self.scores[r]).collect(),
            mode: self.mode,
        }
    }
}

/// Class ids sorted by descending probability, ties broken by lower id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

pub fn top_k_select(probs: &[f64], request: SelectionRequest<'_>) -> Result<SelectionResult> {
    let k = probs.len();
    let order = ranked(probs);
    let (indices, mode) = match request {
        SelectionRequest::FixedK(kappa) => {
            if kappa == 0 || kappa > k {
                return Err(Error::KappaOutOfRange { kappa, max: k });
            }
            (order[..kappa].to_vec(), SelectionMode::FixedK)
        }
        SelectionRequest::DynamicThreshold(t) => {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidThreshold(t));
            }
            let mut chosen: Vec<usize> = order.iter().copied().take_while(|&c| probs[c] > t).collect();
            if chosen.is_empty() {
                chosen.push(order[0]);
            }
            (chosen, SelectionMode::DynamicThreshold)
        }
        SelectionRequest::OracleGt(gt) => {
            if gt.len() != k {
                return Err(Error::Shape(format!(
                    "oracle target has {} entries for {k} classes",
                    gt.len()
                )));
            }
            let chosen: Vec<usize> = order.iter().copied().filter(|&c| gt[c]).collect();
            if chosen.is_empty() {
                return Err(Error::EmptyOracle);
            }
            (chosen, SelectionMode::OracleGt)
        }
    };
    let scores = indices.iter().map(|&c| probs[c]).collect();
    Ok(SelectionResult { indices, scores, mode })
}

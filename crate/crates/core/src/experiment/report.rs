use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::EvalMetrics;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Optimizer step (for per-step records) or epoch index.
    pub index: usize,
    pub total: f64,
    pub seg: f64,
    pub ml: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: usize,
    pub params_backbone: usize,
    pub params_ml_head: usize,
    pub params_seg_head: usize,
    /// Parameters of the separate multi-label model, if any.
    pub params_multilabel_model: usize,
    /// Multiply-accumulates of one inference pass over one image, all models
    /// included.
    pub macs_per_image: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<LossRecord>,
    /// Epoch losses of the standalone multi-label model.
    pub multilabel_epochs: Vec<LossRecord>,
    pub metrics: EvalMetrics,
    pub inverse_tau: Vec<f64>,
    pub tau_shared: bool,
    /// Number of leading ranks that received training signal.
    pub ranks_trained: usize,
    /// Rank correlation between rank index and learned `1/tau` over the
    /// trained ranks.
    pub tau_rank_spearman: Option<f64>,
    /// Forward passes through a multi-label head during training and the
    /// final evaluation.
    pub ml_head_evaluations: u64,
    pub cost: CostReport,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        RunReport {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson correlation of average ranks). `None` when
/// either side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation of rank index against `1/tau` over the first
/// `ranks` entries.
pub fn tau_rank_correlation(inverse_tau: &[f64], ranks: usize) -> Option<f64> {
    let n = ranks.min(inverse_tau.len());
    let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
    spearman(&idx, &inverse_tau[..n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 1.0, -4.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), None);
        assert_eq!(spearman(&[1.0], &[3.0]), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_matches_rank_difference_formula() {
        // Without ties: 1 - 6 sum d^2 / (n (n^2 - 1)).
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [9.1, 9.5, 7.0, 5.2, 6.0, 1.0];
        let rx = average_ranks(&x);
        let ry = average_ranks(&y);
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let n = 6.0;
        let expect = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman(&x, &y).unwrap() - expect).abs() < 1e-12);
        assert!(tau_rank_correlation(&y, 6).unwrap() < -0.5);
        assert_eq!(tau_rank_correlation(&y, 1), None);
    }
}

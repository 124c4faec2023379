//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::SelectionResult;
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg_weight: f64,
    pub ml_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg_weight: 1.0,
            ml_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.seg_weight >= 0.0 && self.ml_weight >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymmetricLossParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability margin subtracted from negatives before their term.
    pub clip_margin: f64,
}

impl Default for AsymmetricLossParams {
    fn default() -> Self {
        AsymmetricLossParams {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip_margin: 0.05,
        }
    }
}

impl AsymmetricLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0 && (0.0..1.0).contains(&self.clip_margin) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid asymmetric loss parameters {self:?}")))
        }
    }
}

/// Guard keeping probabilities away from 0 and 1 before taking logs.
/// At 32 bits, `1 - 1e-8` rounds to one, so the machine epsilon is the floor.
pub fn probability_guard<T: Real>() -> f64 {
    1e-8f64.max(T::epsilon().f64())
}

/// Mean over classes of the asymmetric multi-label loss.
///
/// Positives contribute `-(1-p)^gp log p`; negatives contribute
/// `-pm^gn log(1-pm)` with `pm = max(p - margin, 0)`.
pub fn asymmetric_loss<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &[bool],
    params: &AsymmetricLossParams,
) -> Result<Var> {
    params.validate()?;
    let k = tape.shape(probs).iter().product::<usize>();
    if tape.shape(probs).len() != 1 || target.len() != k {
        return Err(Error::Shape(format!(
            "probabilities {:?} do not match a target of {} classes",
            tape.shape(probs),
            target.len()
        )));
    }
    if let Some(bad) = tape.value(probs).iter().map(|p| p.f64()).find(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidProbability(bad));
    }
    let eps = probability_guard::<T>();
    let p = tape.clamp(probs, eps, 1.0 - eps)?;

    let log_p = tape.log(p)?;
    let one_minus_p = affine(tape, p, -1.0, 1.0)?;
    let focus_pos = tape.pow_scalar(one_minus_p, params.gamma_pos)?;
    let pos = tape.mul(focus_pos, log_p)?;

    let shifted = tape.add_scalar(p, -params.clip_margin)?;
    let pm = tape.clamp(shifted, 0.0, 1.0)?;
    let one_minus_pm = affine(tape, pm, -1.0, 1.0)?;
    let log_neg = tape.log(one_minus_pm)?;
    let focus_neg = tape.pow_scalar(pm, params.gamma_neg)?;
    let neg = tape.mul(focus_neg, log_neg)?;

    let y: Vec<T> = target.iter().map(|&t| if t { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = target.iter().map(|&t| if t { T::zero() } else { T::one() }).collect();
    let y = tape.constant(&[k], y)?;
    let not_y = tape.constant(&[k], not_y)?;
    let pos = tape.mul(pos, y)?;
    let neg = tape.mul(neg, not_y)?;
    let both = tape.add(pos, neg)?;
    let mean = tape.mean(both)?;
    Ok(tape.scalar_mul(mean, -1.0)?)
}

fn affine<T: Real>(tape: &mut Tape<T>, x: Var, scale: f64, shift: f64) -> Result<Var> {
    let scaled = tape.scalar_mul(x, scale)?;
    Ok(tape.add_scalar(scaled, shift)?)
}

/// Cross-entropy over the selected columns of `z`.
///
/// Each pixel's ground-truth id is mapped to its rank in `sel`. Pixels whose
/// class was not selected, or that carry `ignore_index`, are left out. Returns
/// the mean over the remaining pixels together with their count; with none
/// left the loss is an exact zero.
pub fn selected_ce<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    gt: &[u16],
    sel: &SelectionResult,
    ignore_index: u16,
) -> Result<(Var, usize)> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != gt.len() || shape[1] != sel.len() {
        return Err(Error::Shape(format!(
            "probabilities {shape:?} do not match {} pixels over {} selected classes",
            gt.len(),
            sel.len()
        )));
    }
    let kappa = shape[1];
    let span = sel.indices.iter().copied().max().unwrap_or(0) + 1;
    let positions = sel.positions(span);
    let picks: Vec<usize> = gt
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c != ignore_index)
        .filter_map(|(p, &c)| positions.get(c as usize).copied().flatten().map(|rank| p * kappa + rank))
        .collect();
    if picks.is_empty() {
        return Ok((tape.scalar(T::zero()), 0));
    }
    let flat = tape.reshape(z, &[shape[0] * kappa, 1])?;
    let chosen = tape.gather_rows(flat, &picks)?;
    let safe = tape.clamp(chosen, T::min_positive_value().f64(), 1.0)?;
    let logs = tape.log(safe)?;
    let mean = tape.mean(logs)?;
    Ok((tape.scalar_mul(mean, -1.0)?, picks.len()))
}

/// `seg_weight * seg + ml_weight * ml`, the multi-label term being optional.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, seg: Var, ml: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let seg = tape.scalar_mul(seg, weights.seg_weight)?;
    match ml {
        Some(ml) => {
            let ml = tape.scalar_mul(ml, weights.ml_weight)?;
            Ok(tape.add(seg, ml)?)
        }
        None => Ok(seg),
    }
}

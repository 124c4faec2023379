use super::{RankTemperatures, SelectionResult};
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, BilinearUpsampler, EncoderLayer};
use crate::tensor::{ParamStore, Real, Tape, Var};

pub struct PixelClassification {
    /// `[P, kappa']` probabilities; every row sums to one.
    pub z: Var,
    /// `[n, kappa']` cosine similarities between refined pixel and category
    /// embeddings, before temperature scaling.
    pub raw_logits: Var,
    /// Temperature-scaled (and upsampled, when requested) softmax inputs.
    pub scaled_logits: Var,
}

/// Classifies every pixel over the selected categories only.
///
/// The selected rows of `categories` are prepended to the pixel tokens, both
/// pass through `psi` jointly, and the l2-normalized dot products are scaled
/// by the inverse temperature of each column's rank. With `upsample`, the
/// scaled logits are interpolated to the output grid before the softmax.
#[allow(clippy::too_many_arguments)]
pub fn rank_adaptive_pixel_classify<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pixel_tokens: Var,
    categories: Var,
    sel: &SelectionResult,
    temps: &RankTemperatures,
    psi: &[EncoderLayer],
    upsample: Option<&BilinearUpsampler>,
) -> Result<PixelClassification> {
    let kappa = sel.len();
    if kappa == 0 || kappa > temps.kappa_max {
        return Err(Error::KappaOutOfRange {
            kappa,
            max: temps.kappa_max,
        });
    }
    let n = tape.shape(pixel_tokens)[0];
    let chosen = tape.gather_rows(categories, &sel.indices)?;
    let mut joint = tape.concat(&[chosen, pixel_tokens], 0)?;
    for layer in psi {
        joint = layer.forward(tape, store, joint)?;
    }
    let cats = tape.rows(joint, 0, kappa)?;
    let pixels = tape.rows(joint, kappa, kappa + n)?;
    let cats = tape.l2_normalize(cats)?;
    let pixels = tape.l2_normalize(pixels)?;
    let cats_t = tape.transpose(cats)?;
    let raw_logits = tape.matmul(pixels, cats_t)?;

    let inv_tau = temps.inverse_temperatures(tape, store, kappa)?;
    let (scaled, z) = rank_adaptive_softmax(tape, raw_logits, inv_tau, upsample)?;
    Ok(PixelClassification {
        z,
        raw_logits,
        scaled_logits: scaled,
    })
}

/// `z[p, k] = exp(s[p, k] / tau_k) / sum_l exp(s[p, l] / tau_l)` for
/// `logits: [n, kappa]` and `inverse_tau: [kappa]`. Returns the softmax input
/// and `z`.
pub fn rank_adaptive_softmax<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    inverse_tau: Var,
    upsample: Option<&BilinearUpsampler>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || tape.shape(inverse_tau) != [shape[1]] {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match temperatures {:?}",
            tape.shape(inverse_tau)
        )));
    }
    let scale = broadcast_rows(tape, inverse_tau, shape[0])?;
    let mut scaled = tape.mul(logits, scale)?;
    if let Some(up) = upsample {
        scaled = up.apply(tape, scaled)?;
    }
    let z = tape.softmax(scaled)?;
    Ok((scaled, z))
}

/// Conventional classification over all categories with one shared
/// temperature.
pub fn complete_label_classify<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pixel_tokens: Var,
    categories: Var,
    temps: &RankTemperatures,
    psi: &[EncoderLayer],
    upsample: Option<&BilinearUpsampler>,
) -> Result<PixelClassification> {
    let k = tape.shape(categories)[0];
    let sel = SelectionResult::identity(k);
    rank_adaptive_pixel_classify(tape, store, pixel_tokens, categories, &sel, &temps.as_shared(), psi, upsample)
}

/// Original category id of the most probable column of every row of `z`.
/// Ties go to the lower rank.
pub fn predict_classes<T: Real>(tape: &Tape<T>, z: Var, sel: &SelectionResult) -> Vec<u16> {
    let kappa = sel.len();
    tape.value(z)
        .chunks(kappa)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            sel.indices[best] as u16
        })
        .collect()
}

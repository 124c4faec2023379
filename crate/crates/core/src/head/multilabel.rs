use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CategoryTable;
use crate::error::{Error, Result};
use crate::nn::{downsample_tokens, global_average_pool, DecoderLayer, EncoderLayer};
use crate::tensor::{ParamGroup, ParamStore, Real, Tape, Var};

/// Architecture of the transform that scores category presence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiLabelHeadVariant {
    /// Global average pooling followed by a linear projection onto `h`.
    GapLinear,
    /// One encoder layer over `[category tokens; downsampled pixel tokens]`.
    TranEnc1,
    /// Two decoder layers with category tokens as queries.
    TranDec2,
}

impl std::fmt::Display for MultiLabelHeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MultiLabelHeadVariant::GapLinear => "gap_linear",
            MultiLabelHeadVariant::TranEnc1 => "tran_enc1",
            MultiLabelHeadVariant::TranDec2 => "tran_dec2",
        })
    }
}

#[derive(Clone, Debug)]
pub struct MultiLabelHead {
    pub variant: MultiLabelHeadVariant,
    pub encoder: Option<EncoderLayer>,
    pub decoders: Vec<DecoderLayer>,
    pub downsample: usize,
}

impl MultiLabelHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        variant: MultiLabelHeadVariant,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        downsample: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let group = ParamGroup::MlHead;
        let mut head = MultiLabelHead {
            variant,
            encoder: None,
            decoders: Vec::new(),
            downsample,
        };
        match variant {
            MultiLabelHeadVariant::GapLinear => {}
            MultiLabelHeadVariant::TranEnc1 => {
                head.encoder = Some(EncoderLayer::new(store, &format!("{name}.enc0"), dim, heads, mlp_hidden, group, rng)?);
            }
            MultiLabelHeadVariant::TranDec2 => {
                for i in 0..2 {
                    head.decoders
                        .push(DecoderLayer::new(store, &format!("{name}.dec{i}"), dim, heads, mlp_hidden, group, rng)?);
                }
            }
        }
        Ok(head)
    }
}

pub struct MultiLabelOutput {
    /// `[K]` presence probabilities.
    pub probs: Var,
    /// `[K]` pre-sigmoid scores.
    pub logits: Var,
    /// `[K, d]` category embeddings after the transform (the raw table rows
    /// for `GapLinear`).
    pub refined: Var,
}

/// Presence probabilities `sigmoid(score_k)` for every category.
pub fn multilabel_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pixel_tokens: Var,
    grid: (usize, usize),
    table: &CategoryTable,
    head: &MultiLabelHead,
) -> Result<MultiLabelOutput> {
    let weights = table
        .multilabel
        .as_ref()
        .ok_or_else(|| Error::Config("category table has no multi-label weights".into()))?;
    let shape = tape.shape(pixel_tokens).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] != table.dim {
        return Err(Error::Shape(format!(
            "pixel tokens {shape:?} do not match embedding dim {}",
            table.dim
        )));
    }
    let k = table.num_classes;
    let h = tape.param(store, weights.h);
    let bias = tape.param(store, weights.bias);
    let categories = table.embeddings(tape, store);

    let (scores, refined) = match head.variant {
        MultiLabelHeadVariant::GapLinear => {
            let pooled = global_average_pool(tape, pixel_tokens)?;
            let pooled = tape.reshape(pooled, &[1, table.dim])?;
            let ht = tape.transpose(h)?;
            let s = tape.matmul(pooled, ht)?;
            (tape.reshape(s, &[k])?, categories)
        }
        MultiLabelHeadVariant::TranEnc1 => {
            let enc = head.encoder.as_ref().expect("variant has an encoder");
            let pixels = downsample_tokens(tape, pixel_tokens, grid, head.downsample)?;
            let joint = tape.concat(&[categories, pixels], 0)?;
            let joint = enc.forward(tape, store, joint)?;
            let refined = tape.rows(joint, 0, k)?;
            let prod = tape.mul(refined, h)?;
            (tape.sum_axis(prod, 1)?, refined)
        }
        MultiLabelHeadVariant::TranDec2 => {
            let pixels = downsample_tokens(tape, pixel_tokens, grid, head.downsample)?;
            let mut q = categories;
            for dec in &head.decoders {
                q = dec.forward(tape, store, q, pixels)?;
            }
            let prod = tape.mul(q, h)?;
            (tape.sum_axis(prod, 1)?, q)
        }
    };
    let logits = tape.add(scores, bias)?;
    let probs = tape.sigmoid(logits)?;
    Ok(MultiLabelOutput { probs, logits, refined })
}

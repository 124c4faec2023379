use rand::Rng;

use crate::nn::{normal_tensor, INIT_STD};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

/// Multi-label classification rows `h_k` and their biases.
#[derive(Clone, Debug)]
pub struct MultiLabelWeights {
    pub h: ParamId,
    pub bias: ParamId,
}

/// Per-category weights. `w` doubles as the category embeddings fed to the
/// multi-label and the pixel-classification transforms.
#[derive(Clone, Debug)]
pub struct CategoryTable {
    pub w: ParamId,
    pub multilabel: Option<MultiLabelWeights>,
    pub num_classes: usize,
    pub dim: usize,
}

impl CategoryTable {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        num_classes: usize,
        dim: usize,
        with_multilabel: bool,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if num_classes < 2 {
            return Err(TensorError::InvalidShape {
                context: "a category table needs at least two classes",
                shape: vec![num_classes],
            });
        }
        let w = store.register(
            format!("{name}.w"),
            ParamGroup::SegHead,
            normal_tensor(&[num_classes, dim], INIT_STD, rng),
        )?;
        let multilabel = if with_multilabel {
            Some(MultiLabelWeights {
                h: store.register(
                    format!("{name}.h"),
                    ParamGroup::MlHead,
                    normal_tensor(&[num_classes, dim], INIT_STD, rng),
                )?,
                bias: store.register(format!("{name}.ml_bias"), ParamGroup::MlHead, Tensor::zeros(&[num_classes]))?,
            })
        } else {
            None
        };
        Ok(CategoryTable {
            w,
            multilabel,
            num_classes,
            dim,
        })
    }

    pub fn embeddings<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Var {
        tape.param(store, self.w)
    }
}

/// Inverse temperature every rank starts from.
pub const INIT_INVERSE_TAU: f64 = 10.0;

/// Learnable `log(1/tau_k)` per rank position.
#[derive(Clone, Debug)]
pub struct RankTemperatures {
    pub log_inverse_tau: ParamId,
    pub kappa_max: usize,
    /// When set, rank 0's temperature is used at every rank.
    pub shared: bool,
}

impl RankTemperatures {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, kappa_max: usize, shared: bool) -> Result<Self, TensorError> {
        let log_inverse_tau = store.register(
            format!("{name}.log_inverse_tau"),
            ParamGroup::SegHead,
            Tensor::filled(&[kappa_max], T::of(INIT_INVERSE_TAU.ln())),
        )?;
        Ok(RankTemperatures {
            log_inverse_tau,
            kappa_max,
            shared,
        })
    }

    pub fn as_shared(&self) -> Self {
        RankTemperatures {
            shared: true,
            ..self.clone()
        }
    }

    /// Rank index used for each of the first `count` ranks.
    pub fn rank_slots(&self, count: usize) -> Vec<usize> {
        if self.shared {
            vec![0; count]
        } else {
            (0..count).collect()
        }
    }

    /// `[count]` vector of `1/tau` for ranks `0..count`.
    pub fn inverse_temperatures<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        count: usize,
    ) -> Result<Var, TensorError> {
        let log_t = tape.param(store, self.log_inverse_tau);
        let picked = tape.gather_rows(log_t, &self.rank_slots(count))?;
        tape.exp(picked)
    }

    /// Current `1/tau` values for all `kappa_max` ranks.
    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        store
            .get(self.log_inverse_tau)
            .tensor
            .data()
            .iter()
            .map(|v| v.f64().exp())
            .collect()
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Seeded `N(0, std^2)` tensor.
pub fn normal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Repeats a `[d]` vector into `[n, d]` as `ones[n, 1] x v[1, d]`.
pub fn broadcast_rows<T: Real>(tape: &mut Tape<T>, v: Var, n: usize) -> Result<Var, TensorError> {
    let d = tape.value(v).len();
    let row = tape.reshape(v, &[1, d])?;
    let ones = tape.constant(&[n, 1], vec![T::one(); n])?;
    tape.matmul(ones, row)
}

/// `y = x W + b` with `W: [d_in, d_out]`, `b: [d_out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let weight = store.register(
            format!("{name}.weight"),
            group,
            normal_tensor(&[d_in, d_out], INIT_STD, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[d_out]))?;
        Ok(LinearLayer {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// `x: [n, d_in] -> [n, d_out]`
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

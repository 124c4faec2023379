//! Pre-norm transformer encoder and decoder layers.
//!
//! No positional information is injected inside a layer, so an encoder layer
//! is permutation-equivariant over its tokens and a decoder layer is
//! invariant to the row order of its context.

use rand::Rng;

use super::LinearLayer;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Result<Self, TensorError> {
        Ok(LayerNormParams {
            gain: store.register(format!("{name}.gain"), group, Tensor::filled(&[dim], T::one()))?,
            bias: store.register(format!("{name}.bias"), group, Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidShape {
                context: "embedding dim must be divisible by head count",
                shape: vec![dim, heads],
            });
        }
        Ok(Attention {
            query: LinearLayer::new(store, &format!("{name}.query"), dim, dim, group, rng)?,
            key: LinearLayer::new(store, &format!("{name}.key"), dim, dim, group, rng)?,
            value: LinearLayer::new(store, &format!("{name}.value"), dim, dim, group, rng)?,
            output: LinearLayer::new(store, &format!("{name}.output"), dim, dim, group, rng)?,
            heads,
            dim,
        })
    }

    /// `queries: [m, d]`, `context: [n, d]` -> `[m, d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
    ) -> Result<Var, TensorError> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, context)?;
        let v = self.value.forward(tape, store, context)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.columns(q, lo, hi)?;
            let kh = tape.columns(k, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scalar_mul(scores, scale)?;
            let weights = tape.softmax(scores)?;
            let vh = tape.columns(v, lo, hi)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat(&outs, 1)?;
        self.output.forward(tape, store, merged)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Mlp {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), dim, hidden, group, rng)?,
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), hidden, dim, group, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

fn check_dim<T: Real>(tape: &Tape<T>, x: Var, dim: usize, kind_shape: &[usize]) -> Result<(), TensorError> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != dim {
        return Err(TensorError::ShapeMismatch {
            kind: crate::tensor::OpKind::MatMul,
            lhs: s.to_vec(),
            rhs: kind_shape.to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    pub attn: Attention,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
    pub dim: usize,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(EncoderLayer {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim, group)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, group, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim, group)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, group, rng)?,
            dim,
            heads,
        })
    }

    /// `x + attn(ln1(x))`, then `+ mlp(ln2(.))`. `tokens: [n, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var, TensorError> {
        check_dim(tape, tokens, self.dim, &[self.dim])?;
        let h = self.norm1.forward(tape, store, tokens)?;
        let a = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(tokens, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNormParams,
    pub self_attn: Attention,
    pub norm2: LayerNormParams,
    pub cross_attn: Attention,
    pub norm3: LayerNormParams,
    pub mlp: Mlp,
    pub dim: usize,
    pub heads: usize,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(DecoderLayer {
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), dim, group)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, group, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), dim, group)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, group, rng)?,
            norm3: LayerNormParams::new(store, &format!("{name}.norm3"), dim, group)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, group, rng)?,
            dim,
            heads,
        })
    }

    /// `queries: [m, d]` attend to themselves, then to `context: [n, d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
    ) -> Result<Var, TensorError> {
        check_dim(tape, queries, self.dim, &[self.dim])?;
        check_dim(tape, context, self.dim, &[self.dim])?;
        let h = self.norm1.forward(tape, store, queries)?;
        let a = self.self_attn.forward(tape, store, h, h)?;
        let x = tape.add(queries, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, context)?;
        let x = tape.add(x, c)?;
        let h = self.norm3.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

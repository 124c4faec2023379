use std::sync::Arc;

use crate::tensor::{Real, SparseMatrix, Tape, TensorError, Var};

/// Mean over tokens: `[n, d] -> [d]`.
pub fn global_average_pool<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var, TensorError> {
    let s = tape.shape(tokens);
    if s.len() != 2 || s[0] == 0 {
        return Err(TensorError::InvalidShape {
            context: "global_average_pool expects a non-empty [n, d] token set",
            shape: s.to_vec(),
        });
    }
    tape.mean_axis(tokens, 0)
}

/// Non-overlapping `factor x factor` average pooling on a `(h, w)` token
/// grid, expressed as a constant pooling matrix so it stays differentiable.
pub fn downsample_tokens<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    grid: (usize, usize),
    factor: usize,
) -> Result<Var, TensorError> {
    let (h, w) = grid;
    let n = tape.shape(tokens)[0];
    if factor == 0 || h % factor != 0 || w % factor != 0 || n != h * w {
        return Err(TensorError::InvalidShape {
            context: "token grid must match n and be divisible by the factor",
            shape: vec![h, w, factor, n],
        });
    }
    if factor == 1 {
        return Ok(tokens);
    }
    let (oh, ow) = (h / factor, w / factor);
    let weight = T::one() / T::of((factor * factor) as f64);
    let mut pool = vec![T::zero(); oh * ow * n];
    for y in 0..h {
        for x in 0..w {
            let out = (y / factor) * ow + x / factor;
            pool[out * n + y * w + x] = weight;
        }
    }
    let pool = tape.constant(&[oh * ow, n], pool)?;
    tape.matmul(pool, tokens)
}

/// Bilinear interpolation from a coarse `(h, w)` grid to a fine `(H, W)`
/// grid with half-pixel centers and edge clamping, as a `[H*W, h*w]` matrix.
#[derive(Clone, Debug)]
pub struct BilinearUpsampler {
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    matrix: Arc<SparseMatrix>,
}

fn axis_weights(coarse: usize, fine: usize) -> Vec<(usize, usize, f64)> {
    let scale = coarse as f64 / fine as f64;
    (0..fine)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (coarse - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(coarse - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl BilinearUpsampler {
    pub fn new(coarse: (usize, usize), fine: (usize, usize)) -> Self {
        let (ch, cw) = coarse;
        let (fh, fw) = fine;
        let wy = axis_weights(ch, fh);
        let wx = axis_weights(cw, fw);
        let mut rows = Vec::with_capacity(fh * fw);
        for &(y0, y1, ty) in &wy {
            for &(x0, x1, tx) in &wx {
                // Taps collapse at the border; keep one entry per source cell.
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (c, w) in [
                    (y0 * cw + x0, (1.0 - ty) * (1.0 - tx)),
                    (y0 * cw + x1, (1.0 - ty) * tx),
                    (y1 * cw + x0, ty * (1.0 - tx)),
                    (y1 * cw + x1, ty * tx),
                ] {
                    match row.iter_mut().find(|e| e.0 == c) {
                        Some(e) => e.1 += w,
                        None => row.push((c, w)),
                    }
                }
                row.retain(|e| e.1 != 0.0);
                row.sort_by_key(|e| e.0);
                rows.push(row);
            }
        }
        let matrix = SparseMatrix::from_rows(ch * cw, rows).expect("taps lie inside the coarse grid");
        BilinearUpsampler {
            coarse,
            fine,
            matrix: Arc::new(matrix),
        }
    }

    /// Dense `[H*W, h*w]` interpolation matrix.
    pub fn weights(&self) -> Vec<f64> {
        self.matrix.to_dense()
    }

    /// `[h*w, c] -> [H*W, c]`
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        if self.coarse == self.fine {
            return Ok(x);
        }
        tape.sparse_matmul(&self.matrix, x)
    }
}

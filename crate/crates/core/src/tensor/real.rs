use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point precision selected for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element type of every tensor. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
    ///
    /// `a` is `[m, k]` (stored `[k, m]` when `a_t`), `b` is `[k, n]`
    /// (stored `[n, k]` when `b_t`), `c` is `[m, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    /// `exp` over a slice, in place.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = v.exp());
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite real converts to f64")
    }
}

struct Strides {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> Strides {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    Strides { rsa, csa, rsb, csb }
}

fn check_gemm_len<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm output length");
}

/// Single-precision `exp` written so the loop vectorizes: range reduction by
/// `ln 2` (rounding with the 1.5 * 2^23 trick instead of a float-to-int
/// conversion) and the degree-6 Cephes `expf` polynomial, within about 2 ulp.
/// Results below the normal range flush to zero.
#[inline]
fn expf_poly(x: f32) -> f32 {
    const HI: f32 = 88.376_26;
    const LO: f32 = -87.336_55;
    const ROUND: f32 = 12_582_912.0;
    let xc = x.min(HI).max(LO);
    let shifted = xc * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = xc - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1;
    let y = p * (r * r) + r + 1.0;
    // The low mantissa bits of `shifted` hold n as an integer.
    let exponent = (shifted.to_bits() as i32 - 0x4B40_0000 + 127) << 23;
    let y = y * f32::from_bits(exponent as u32);
    if x < LO {
        0.0
    } else {
        y
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn exp_in_place(xs: &mut [f32]) {
        for v in xs.iter_mut() {
            *v = expf_poly(*v);
        }
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_t: bool,
        b: &[f32],
        b_t: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        check_gemm_len(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let s = strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: lengths are checked above and strides describe dense
        // row-major (or transposed) layouts inside those buffers.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                s.rsa,
                s.csa,
                b.as_ptr(),
                s.rsb,
                s.csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_t: bool,
        b: &[f64],
        b_t: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        check_gemm_len(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let s = strides(m, k, n, a_t, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                s.rsa,
                s.csa,
                b.as_ptr(),
                s.rsb,
                s.csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_exp_tracks_libm() {
        let mut worst = 0.0f64;
        let xs: Vec<f32> = (-8800..=8800).map(|i| i as f32 * 0.01 + 0.003).collect();
        let mut ys = xs.clone();
        f32::exp_in_place(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let exact = (x as f64).exp();
            if exact > f32::MIN_POSITIVE as f64 {
                worst = worst.max(((y as f64) - exact).abs() / exact);
            }
        }
        assert!(worst < 4.0 * f32::EPSILON as f64, "{worst:e}");
        let mut edge = [0.0f32, -1e30, -100.0, 1.0];
        f32::exp_in_place(&mut edge);
        assert_eq!(edge[..3], [1.0, 0.0, 0.0]);
        assert!((edge[3] - std::f32::consts::E).abs() <= f32::EPSILON * 4.0);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T b
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a b^T
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        // accumulate
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}

//! Scalar helpers: a branch-light exponential for the softmax hot path, a
//! Cholesky solver for the ridge regressions, and seed derivation.

use crate::Scalar;
use crate::matrix::Matrix;

const LOG2_E: f64 = std::f64::consts::LOG2_E;
// Cody-Waite split of ln 2; the high part is exact when multiplied by small k.
const LN2_HI: f64 = 6.93147180369123816490e-01;
const LN2_LO: f64 = 1.90821492927058770002e-10;

/// `exp(x)` via argument reduction and a fixed-order Taylor polynomial.
///
/// Accurate to a few ulp over the reduced range and identical across builds,
/// which keeps softmax outputs reproducible independent of the platform libm.
/// Extreme and non-finite inputs fall through to the standard library.
#[inline]
pub fn fast_exp<S: Scalar>(x: S) -> S {
    let xf = x.to_f64().unwrap_or(f64::NAN);
    S::from_f64(fast_exp_f64(xf)).unwrap()
}

#[inline]
pub fn fast_exp_f64(x: f64) -> f64 {
    if !(-708.0..=708.0).contains(&x) {
        return x.exp();
    }
    exp_reduced(x)
}

/// `exp(x)` for `x <= 0`, fully branch-free so softmax rows auto-vectorize.
/// Inputs are clamped below at -708, where the true value already underflows
/// past the smallest normal relative to any softmax numerator that matters.
/// The power-of-two rescale runs on the bit pattern (shift and add only), so
/// the whole body lowers to straight-line SIMD.
#[inline(always)]
pub fn exp_nonpositive<S: Scalar>(x: S) -> S {
    S::from_f64(exp_nonpositive_f64(x.to_f64().unwrap_or(f64::NAN))).unwrap()
}

// 1.5 * 2^52: adding it rounds to the nearest integer in the mantissa.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

#[inline(always)]
pub fn exp_nonpositive_f64(x: f64) -> f64 {
    let x = x.max(-708.0);
    let shifted = x * LOG2_E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = exp_poly(r);
    // Mantissa of `shifted` holds 2^51 + k; rebase to the IEEE exponent field.
    let bits = shifted.to_bits().wrapping_add(1023u64.wrapping_sub(1u64 << 51)) << 52;
    p * f64::from_bits(bits)
}

/// Core reduction; requires |x| <= 708 so the exponent stays in normal range.
#[inline(always)]
fn exp_reduced(x: f64) -> f64 {
    let k = (x * LOG2_E).round();
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = exp_poly(r);
    let bits = ((1023 + k as i64) as u64) << 52;
    p * f64::from_bits(bits)
}

/// Taylor series to r^13; |r| <= ln2/2 keeps the truncation below 1e-16.
#[inline(always)]
fn exp_poly(r: f64) -> f64 {
    let mut p = 1.0 / 6227020800.0; // 1/13!
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p
}

/// Fixed-pattern eight-lane reductions: deterministic regardless of vector
/// width, and wide enough for the compiler to keep the lanes in registers.
pub fn sum_lanes_8<S: Scalar>(values: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let mut chunks = values.chunks_exact(8);
    for chunk in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(chunk) {
            *l += v;
        }
    }
    let mut total = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
    for &v in chunks.remainder() {
        total += v;
    }
    total
}

pub fn max_lanes_8<S: Scalar>(values: &[S]) -> S {
    let mut lanes = [S::neg_infinity(); 8];
    let mut chunks = values.chunks_exact(8);
    for chunk in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(chunk) {
            *l = l.max(v);
        }
    }
    let mut best = S::neg_infinity();
    for &l in &lanes {
        best = best.max(l);
    }
    for &v in chunks.remainder() {
        best = best.max(v);
    }
    best
}

pub fn dot_lanes_8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::zero(); 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (ca, cb) in (&mut ac).zip(&mut bc) {
        for ((l, &x), &y) in lanes.iter_mut().zip(ca).zip(cb) {
            *l += x * y;
        }
    }
    let mut total = ((lanes[0] + lanes[4]) + (lanes[2] + lanes[6]))
        + ((lanes[1] + lanes[5]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        total += x * y;
    }
    total
}

/// Solve the symmetric positive-definite system `a · x = b` in place via
/// Cholesky. Returns `None` if a pivot collapses (matrix not PD).
pub fn cholesky_solve<S: Scalar>(mut a: Matrix<S>, b: &[S]) -> Option<Vec<S>> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(b.len(), n);
    // Lower-triangular factor stored in place.
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if d <= S::zero() || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        a.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, s / djj);
        }
    }
    // Forward then backward substitution.
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= a.get(i, k) * y[k];
        }
        y[i] = s / a.get(i, i);
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= a.get(k, i) * y[k];
        }
        y[i] = s / a.get(i, i);
    }
    Some(y)
}

/// Derive a child seed from a base seed and a path of indices (splitmix64
/// chain). Stable across runs and platforms.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0x9e3779b97f4a7c15);
    for &p in parts {
        state = splitmix64(state ^ p.wrapping_mul(0xff51afd7ed558ccd));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

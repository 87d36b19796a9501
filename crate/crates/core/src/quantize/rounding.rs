//! Element-wise weight rounding rules.
//!
//! Stochastic rules draw exactly one uniform per entry, in row-major order,
//! whatever the entry's value, so the stream position after a call depends
//! only on the matrix size. Zeros are always emitted as `+0.0`.

use crate::numerics::{hard_sigmoid, Matrix, Rng};

use super::Variant;

#[inline]
fn signed(sign_negative: bool, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else if sign_negative {
        -magnitude
    } else {
        magnitude
    }
}

/// `+1` with probability `hard_sigmoid(w)`, else `-1`.
pub fn binarize_stoch(w: &Matrix, rng: &mut Rng) -> Matrix {
    w.map(|v| {
        let u = rng.uniform();
        if u < hard_sigmoid(v) {
            1.0
        } else {
            -1.0
        }
    })
}

/// `+1` where `w >= 0`, else `-1`.
pub fn binarize_det(w: &Matrix) -> Matrix {
    w.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// `sign(w)` kept with probability `clip(|2w|, 0, 1)`, else `0`; `sign(0) = 0`.
///
/// Note the expectation is `sign(w) * clip(2|w|, 0, 1)`, not `w`.
pub fn ternarize_stoch(w: &Matrix, rng: &mut Rng) -> Matrix {
    w.map(|v| {
        let u = rng.uniform();
        let p = (2.0 * v.abs()).clamp(0.0, 1.0);
        if v != 0.0 && u < p {
            v.signum()
        } else {
            0.0
        }
    })
}

/// `+1` if `w > 0.5`, `-1` if `w <= -0.5`, else `0`. The boundary asymmetry
/// is intentional.
pub fn ternarize_det(w: &Matrix) -> Matrix {
    w.map(|v| {
        if v > 0.5 {
            1.0
        } else if v <= -0.5 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Fixed-point rounding: clip, then `round(2^f * w) / 2^f` with ties away
/// from zero.
///
/// With `ternary_clamp` the clip range is `±2^-f`, so the only outputs are
/// `{-2^-f, 0, 2^-f}` (Q1.1 gives `{-0.5, 0, 0.5}`). Without it the clip range
/// is `±2^m`.
pub fn pow2_ternarize(w: &Matrix, m: u32, f: u32, ternary_clamp: bool) -> Matrix {
    let scale = (2.0f64).powi(f as i32);
    let bound = if ternary_clamp {
        1.0 / scale
    } else {
        (2.0f64).powi(m as i32)
    };
    w.map(|v| {
        let clipped = v.clamp(-bound, bound);
        let k = (clipped * scale).round();
        signed(k < 0.0, k.abs() / scale)
    })
}

/// Power-of-two quantization of one entry.
///
/// `draw` is the uniform for the stochastic variant; it is ignored by the
/// deterministic one.
#[inline]
pub(crate) fn exp_quantize_scalar(
    v: f64,
    variant: Variant,
    e_min: i32,
    e_max: i32,
    draw: f64,
) -> f64 {
    let a = v.abs();
    let neg = v < 0.0;
    if a == 0.0 {
        return 0.0;
    }
    let top = (2.0f64).powi(e_max);
    if a >= top {
        return signed(neg, top);
    }
    let bottom = (2.0f64).powi(e_min);
    let (lo, p) = if a < bottom {
        // Underflow: choose between 0 and 2^e_min, unbiased in expectation.
        (0.0, a / bottom)
    } else {
        let lo = floor_pow2(a);
        (lo, a / lo - 1.0)
    };
    let round_up = match variant {
        Variant::Stochastic => draw < p,
        Variant::Deterministic => p > 0.5,
    };
    let hi = if lo == 0.0 { bottom } else { 2.0 * lo };
    signed(neg, if round_up { hi } else { lo })
}

/// `2^floor(log2 a)` for a positive normal `a`, computed exactly from the bits.
#[inline]
fn floor_pow2(a: f64) -> f64 {
    debug_assert!(a.is_normal() && a > 0.0);
    f64::from_bits(a.to_bits() & 0x7ff0_0000_0000_0000)
}

/// Rounds each magnitude to a power of two in `[2^e_min, 2^e_max]` (or 0),
/// then restores the sign.
///
/// Stochastic: the exponent rounds up with probability `|w| / 2^floor(log2|w|) - 1`.
/// Deterministic: rounds up iff that probability exceeds 0.5.
/// Below `2^e_min` the choice is between `0` and `2^e_min` with probability
/// `|w| / 2^e_min`.
pub fn exp_quantize(w: &Matrix, variant: Variant, e_min: i32, e_max: i32, rng: &mut Rng) -> Matrix {
    match variant {
        Variant::Stochastic => {
            w.map(|v| exp_quantize_scalar(v, variant, e_min, e_max, rng.uniform()))
        }
        Variant::Deterministic => exp_quantize_det(w, e_min, e_max),
    }
}

pub fn exp_quantize_det(w: &Matrix, e_min: i32, e_max: i32) -> Matrix {
    w.map(|v| exp_quantize_scalar(v, Variant::Deterministic, e_min, e_max, 0.0))
}

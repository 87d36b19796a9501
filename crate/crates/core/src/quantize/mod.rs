//! Weight rounding methods and their bit-packed storage.
//!
//! Four methods are provided, each returning a new matrix whose entries lie
//! in a small finite set:
//!
//! | method        | values                          | variants                 |
//! |---------------|---------------------------------|--------------------------|
//! | `binary`      | `{-1, +1}`                      | stochastic, deterministic|
//! | `ternary`     | `{-1, 0, +1}`                   | stochastic, deterministic|
//! | `pow2ternary` | multiples of `2^-f` (clipped)   | deterministic            |
//! | `expquant`    | `{0} ∪ {±2^e : e_min ≤ e ≤ e_max}` | stochastic, deterministic|
//!
//! `identity` is also accepted and leaves weights untouched; it exists so a
//! quantized code path can be checked against the plain one.

mod pack;
mod rounding;

pub use pack::{PackedTensor, PACK_HEADER_LEN};
pub use rounding::{
    binarize_det, binarize_stoch, exp_quantize, exp_quantize_det, pow2_ternarize,
    ternarize_det, ternarize_stoch,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Identity,
    Binary,
    Ternary,
    Pow2Ternary,
    ExpQuant,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Binary => "binary",
            Method::Ternary => "ternary",
            Method::Pow2Ternary => "pow2ternary",
            Method::ExpQuant => "expquant",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Stochastic,
    #[default]
    Deterministic,
}

fn default_one() -> u32 {
    1
}
fn default_e_min() -> i32 {
    -8
}
fn default_true() -> bool {
    true
}

/// Which rounding rule to apply, and its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub method: Method,
    #[serde(default)]
    pub variant: Variant,
    /// Integer bits including sign (pow2ternary).
    #[serde(default = "default_one")]
    pub m: u32,
    /// Fractional bits (pow2ternary).
    #[serde(default = "default_one")]
    pub f: u32,
    #[serde(default = "default_e_min")]
    pub e_min: i32,
    #[serde(default)]
    pub e_max: i32,
    /// Clip pow2ternary to `±2^-f` instead of `±2^m`.
    #[serde(default = "default_true")]
    pub ternary_clamp: bool,
}

impl QuantizerSpec {
    pub fn new(method: Method, variant: Variant) -> Self {
        Self {
            method,
            variant,
            m: 1,
            f: 1,
            e_min: -8,
            e_max: 0,
            ternary_clamp: true,
        }
    }

    pub fn identity() -> Self {
        Self::new(Method::Identity, Variant::Deterministic)
    }

    pub fn binary(variant: Variant) -> Self {
        Self::new(Method::Binary, variant)
    }

    pub fn ternary(variant: Variant) -> Self {
        Self::new(Method::Ternary, variant)
    }

    /// Qm.f fixed-point rounding.
    pub fn pow2ternary(m: u32, f: u32, ternary_clamp: bool) -> Self {
        Self {
            m,
            f,
            ternary_clamp,
            ..Self::new(Method::Pow2Ternary, Variant::Deterministic)
        }
    }

    pub fn expquant(variant: Variant, e_min: i32, e_max: i32) -> Self {
        Self {
            e_min,
            e_max,
            ..Self::new(Method::ExpQuant, variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidQuantizer("m must be at least 1".into()));
        }
        if self.f > 30 || self.m > 30 {
            return Err(Error::InvalidQuantizer("m and f must be at most 30".into()));
        }
        if self.e_min > self.e_max {
            return Err(Error::InvalidQuantizer(format!(
                "e_min ({}) exceeds e_max ({})",
                self.e_min, self.e_max
            )));
        }
        if !(-126..=127).contains(&self.e_min) || !(-126..=127).contains(&self.e_max) {
            return Err(Error::InvalidQuantizer(
                "exponent bounds must lie in [-126, 127]".into(),
            ));
        }
        if self.method == Method::Pow2Ternary && self.variant == Variant::Stochastic {
            return Err(Error::InvalidQuantizer(
                "pow2ternary is deterministic only".into(),
            ));
        }
        Ok(())
    }

    /// The same rule with its deterministic variant.
    pub fn deterministic(&self) -> Self {
        Self {
            variant: Variant::Deterministic,
            ..*self
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.variant == Variant::Stochastic && self.method != Method::Identity
    }

    /// True for the methods whose masters are clipped to `[-1, 1]` during
    /// training.
    pub fn clips_master(&self) -> bool {
        matches!(self.method, Method::Binary | Method::Ternary)
    }

    /// Applies the rule. Deterministic rules leave `rng` untouched.
    pub fn apply(&self, w: &Matrix, rng: &mut Rng) -> Matrix {
        match (self.method, self.variant) {
            (Method::Identity, _) => w.clone(),
            (Method::Binary, Variant::Stochastic) => binarize_stoch(w, rng),
            (Method::Binary, Variant::Deterministic) => binarize_det(w),
            (Method::Ternary, Variant::Stochastic) => ternarize_stoch(w, rng),
            (Method::Ternary, Variant::Deterministic) => ternarize_det(w),
            (Method::Pow2Ternary, _) => pow2_ternarize(w, self.m, self.f, self.ternary_clamp),
            (Method::ExpQuant, v) => exp_quantize(w, v, self.e_min, self.e_max, rng),
        }
    }

    pub fn apply_deterministic(&self, w: &Matrix) -> Matrix {
        match self.method {
            Method::Identity => w.clone(),
            Method::Binary => binarize_det(w),
            Method::Ternary => ternarize_det(w),
            Method::Pow2Ternary => pow2_ternarize(w, self.m, self.f, self.ternary_clamp),
            Method::ExpQuant => exp_quantize_det(w, self.e_min, self.e_max),
        }
    }

    /// Membership in the method's output set.
    pub fn contains(&self, v: f64) -> bool {
        match self.method {
            Method::Identity => v.is_finite(),
            Method::Binary => v == 1.0 || v == -1.0,
            Method::Ternary => v == 1.0 || v == -1.0 || v == 0.0,
            Method::Pow2Ternary => {
                let scale = (2.0f64).powi(self.f as i32);
                let k = v * scale;
                let bound = if self.ternary_clamp {
                    1.0
                } else {
                    (2.0f64).powi((self.m + self.f) as i32)
                };
                k.is_finite() && k.fract() == 0.0 && k.abs() <= bound
            }
            Method::ExpQuant => {
                if v == 0.0 {
                    return true;
                }
                let a = v.abs();
                if !a.is_normal() || a.to_bits() & 0x000f_ffff_ffff_ffff != 0 {
                    return false;
                }
                let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
                (self.e_min..=self.e_max).contains(&e)
            }
        }
    }

    /// Short label such as `binary_stoch` or `pow2ternary_q1.1`.
    pub fn label(&self) -> String {
        let v = match self.variant {
            Variant::Stochastic => "stoch",
            Variant::Deterministic => "det",
        };
        match self.method {
            Method::Identity => "identity".into(),
            Method::Pow2Ternary => format!("pow2ternary_q{}.{}", self.m, self.f),
            m => format!("{}_{}", m.name(), v),
        }
    }
}

//! Fixed-point rescaling of integer accumulators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QParams;

/// `x / 2^shift` rounded half to even. `shift` must be at least 1.
#[inline(always)]
pub fn rhe_i64(x: i64, shift: u32) -> i64 {
    let half = 1i64 << (shift - 1);
    (x + (half - 1) + ((x >> shift) & 1)) >> shift
}

#[inline(always)]
pub fn rhe_i32(x: i32, shift: u32) -> i32 {
    let half = 1i32 << (shift - 1);
    (x + (half - 1) + ((x >> shift) & 1)) >> shift
}

/// A positive real multiplier `mult * 2^-shift` with a 31-bit mantissa,
/// applied to 32-bit accumulators in 64-bit arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub mult: i32,
    pub shift: u32,
}

impl Requant {
    pub fn new(real: f64) -> Result<Self> {
        if !(real.is_finite() && real > 0.0) {
            return Err(Error::Overflow(format!("requantization multiplier {real} is not a positive finite value")));
        }
        let (m, e) = frexp(real);
        let mut mult = (m * (1u64 << 31) as f64).round() as i64;
        let mut shift = 31 - e;
        if mult == 1 << 31 {
            mult >>= 1;
            shift -= 1;
        }
        if !(1..=62).contains(&shift) {
            return Err(Error::Overflow(format!("requantization multiplier {real} is outside the fixed-point range")));
        }
        Ok(Self { mult: mult as i32, shift: shift as u32 })
    }

    #[inline(always)]
    pub fn apply(&self, acc: i32) -> i64 {
        rhe_i64(acc as i64 * self.mult as i64, self.shift)
    }

    pub fn real(&self) -> f64 {
        self.mult as f64 / (self.shift as f64).exp2()
    }
}

/// Splits `x` into a mantissa in `[0.5, 1)` and a binary exponent.
fn frexp(x: f64) -> (f64, i32) {
    let e = x.log2().floor() as i32 + 1;
    let m = x / (e as f64).exp2();
    // log2 can land one off near powers of two.
    if m >= 1.0 {
        (m / 2.0, e + 1)
    } else if m < 0.5 {
        (m * 2.0, e - 1)
    } else {
        (m, e)
    }
}

/// Multiplier for values `d` with `|d| <= 255`, kept small enough that
/// `d * mult` plus the rounding offset fits in 32 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SmallMult {
    pub mult: i32,
    pub shift: u32,
}

pub const SMALL_MANTISSA_BITS: i32 = 22;

impl SmallMult {
    pub const ZERO: SmallMult = SmallMult { mult: 0, shift: 1 };

    pub fn new(real: f64) -> Result<Self> {
        if !real.is_finite() {
            return Err(Error::Overflow(format!("edge multiplier {real} is not finite")));
        }
        // Every product with |d| <= 255 rounds to zero.
        if real.abs() * 255.0 < 0.5 {
            return Ok(Self::ZERO);
        }
        let (m, e) = frexp(real.abs());
        let mut mult = (m * (1i64 << SMALL_MANTISSA_BITS) as f64).round() as i64;
        let mut shift = SMALL_MANTISSA_BITS - e;
        if mult == 1 << SMALL_MANTISSA_BITS {
            mult >>= 1;
            shift -= 1;
        }
        if !(1..=31).contains(&shift) {
            return Err(Error::Overflow(format!("edge multiplier {real} is outside the fixed-point range")));
        }
        Ok(Self { mult: (mult as i32) * real.signum() as i32, shift: shift as u32 })
    }

    #[inline(always)]
    pub fn apply(&self, d: i32) -> i32 {
        rhe_i32(d * self.mult, self.shift)
    }
}

/// A 256-entry table indexed by `code + 128`, mapping codes of one site to
/// codes of another through a real-valued function.
pub fn code_lut(from: &QParams, to: &QParams, f: impl Fn(f32) -> f32) -> Vec<i8> {
    (-128i32..128)
        .map(|c| {
            let c = c.clamp(from.q_min, from.q_max);
            to.quantize(f(from.dequantize(c))) as i8
        })
        .collect()
}

/// Clamps the rescaled accumulator onto a site's grid.
#[inline(always)]
pub fn to_code(v: i64, zero_point: i32, lo: i32, hi: i32) -> i8 {
    (v + zero_point as i64).clamp(lo as i64, hi as i64) as i8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rhe_oracle(num: i64, shift: u32) -> i64 {
        let q = num as f64 / (shift as f64).exp2();
        q.round_ties_even() as i64
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(rhe_i64(5, 1), 2);
        assert_eq!(rhe_i64(7, 1), 4);
        assert_eq!(rhe_i64(-5, 1), -2);
        assert_eq!(rhe_i64(-7, 1), -4);
        assert_eq!(rhe_i64(6, 2), 2);
        for x in -1000i64..1000 {
            for s in 1..6 {
                assert_eq!(rhe_i64(x, s), rhe_oracle(x, s), "{x} >> {s}");
                assert_eq!(rhe_i32(x as i32, s) as i64, rhe_oracle(x, s));
            }
        }
    }

    #[test]
    fn multiplier_is_accurate() {
        for &r in &[1e-6, 0.003, 0.25, 0.5, 0.7, 1.0, 3.9, 1000.0] {
            let q = Requant::new(r).unwrap();
            assert!(q.mult >= 1 << 30, "{r}: {q:?}");
            assert!(((q.real() - r) / r).abs() < 1e-9, "{r}");
        }
        assert!(Requant::new(0.0).is_err());
        assert!(Requant::new(f64::NAN).is_err());
        assert!(Requant::new(1e30).is_err());
    }

    #[test]
    fn requant_matches_real_rounding() {
        let q = Requant::new(0.0371).unwrap();
        for acc in (-100_000..100_000).step_by(37) {
            let exact = (acc as f64 * q.real()).round_ties_even() as i64;
            assert_eq!(q.apply(acc), exact);
        }
    }

    #[test]
    fn small_mult_fits_and_rounds() {
        for &r in &[0.0019, 0.01, 0.3, 1.0, -0.8, 77.0] {
            let k = SmallMult::new(r).unwrap();
            assert!(k.mult.unsigned_abs() < 1 << SMALL_MANTISSA_BITS);
            for d in -255..=255 {
                let exact = d as f64 * k.mult as f64 / (k.shift as f64).exp2();
                assert_eq!(k.apply(d) as i64, exact.round_ties_even() as i64);
                assert!((k.apply(d) as f64 - d as f64 * r).abs() <= 0.5 + 1e-4 * (d as f64 * r).abs());
            }
        }
        assert_eq!(SmallMult::new(1e-4).unwrap(), SmallMult::ZERO);
        assert_eq!(SmallMult::ZERO.apply(-255), 0);
    }

    #[test]
    fn lut_matches_fake_quantization() {
        let a = QParams { scale: 0.05, zero_point: -10, q_min: -128, q_max: 127 };
        let b = QParams { scale: 0.02, zero_point: -128, q_min: -128, q_max: 127 };
        let lut = code_lut(&a, &b, |v| v.max(0.0));
        for c in -128..128 {
            assert_eq!(lut[(c + 128) as usize] as i32, b.quantize(a.dequantize(c).max(0.0)));
        }
    }
}

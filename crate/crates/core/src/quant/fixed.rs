//! 8-bit signed fixed point with a per-tensor power-of-two exponent.

use serde::{Deserialize, Serialize};

pub const QMAX: i32 = 127;

/// Represented value is `q * 2^exponent` for `q` in `[-127, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct QuantParams {
    pub exponent: i32,
}

impl QuantParams {
    pub fn new(exponent: i32) -> Self {
        Self { exponent }
    }

    pub fn step(&self) -> f64 {
        pow2(self.exponent)
    }

    pub fn max_value(&self) -> f64 {
        QMAX as f64 * self.step()
    }
}

pub fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Smallest exponent with `127 * 2^e >= max_abs`; zero when `max_abs == 0`.
pub fn exponent_for(max_abs: f64) -> i32 {
    if max_abs <= 0.0 || !max_abs.is_finite() {
        return 0;
    }
    let mut e = (max_abs / QMAX as f64).log2().ceil() as i32;
    // guard against log2 rounding on either side
    while QMAX as f64 * pow2(e) < max_abs {
        e += 1;
    }
    while QMAX as f64 * pow2(e - 1) >= max_abs {
        e -= 1;
    }
    e
}

pub fn calibrate_tensor(samples: &[f32]) -> QuantParams {
    let max_abs = samples.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    QuantParams::new(exponent_for(max_abs))
}

pub fn quantize(x: f64, params: QuantParams) -> i8 {
    let scaled = (x * pow2(-params.exponent)).round_ties_even();
    scaled.clamp(-(QMAX as f64), QMAX as f64) as i8
}

pub fn dequantize(q: i8, params: QuantParams) -> f64 {
    q as f64 * params.step()
}

pub fn quantize_slice(xs: &[f32], params: QuantParams) -> Vec<i8> {
    xs.iter().map(|&x| quantize(x as f64, params)).collect()
}

/// Integer `v * 2^-shift` rounded half to even. Negative shifts scale up and
/// return `None` on overflow.
pub fn shift_round(v: i64, shift: i32) -> Option<i64> {
    if shift <= 0 {
        let s = (-shift) as u32;
        if s >= 62 {
            return if v == 0 { Some(0) } else { None };
        }
        return v.checked_mul(1i64 << s);
    }
    if shift >= 63 {
        return Some(0);
    }
    let d = 1i64 << shift;
    Some(div_round_half_even(v, d))
}

/// `num / den` rounded half to even, `den > 0`.
pub fn div_round_half_even(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    // compare 2r with den without overflow
    match (r as i128 * 2).cmp(&(den as i128)) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    }
}

pub fn saturate(v: i64) -> i8 {
    v.clamp(-(QMAX as i64), QMAX as i64) as i8
}

/// Change the exponent of an integer value and saturate to int8.
pub fn requantize(v: i64, from_exp: i32, to_exp: i32) -> i8 {
    match shift_round(v, to_exp - from_exp) {
        Some(x) => saturate(x),
        None => {
            if v > 0 {
                QMAX as i8
            } else {
                -(QMAX as i8)
            }
        }
    }
}

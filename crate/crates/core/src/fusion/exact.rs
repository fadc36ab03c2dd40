//! Correctly rounded arithmetic mean of non-negative doubles.
//!
//! Every finite non-negative `f64` is an integer multiple of 2^-1074, so the
//! sum is accumulated exactly as a big integer in that unit and the final
//! division is rounded once, half to even. The result is independent of input
//! order and the mean of identical values is that value.

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

const MIN_EXP: i64 = -1074;

/// Exact value of `x` in units of 2^-1074. `x` must be finite and ≥ 0.
fn to_scaled(x: f64) -> BigUint {
    debug_assert!(x.is_finite() && x >= 0.0);
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if biased == 0 {
        (frac, MIN_EXP)
    } else {
        (frac | (1u64 << 52), biased - 1075)
    };
    BigUint::from(mantissa) << ((exp - MIN_EXP) as usize)
}

/// `num / den · 2^-1074`, rounded to nearest, ties to even. The result must
/// be below 2^1024; for means of values in [0, 1] it always is.
fn round_ratio(num: &BigUint, den: &BigUint) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    // scale so the integer quotient carries at least 55 significant bits
    let shift = 55 - (num.bits() as i64 - den.bits() as i64);
    let (n, d) = if shift >= 0 {
        (num << shift as usize, den.clone())
    } else {
        (num.clone(), den << (-shift) as usize)
    };
    let q = &n / &d;
    let sticky = !(&n % &d).is_zero();

    // value = q · 2^(MIN_EXP - shift); pick the LSB exponent of the result
    let q_bits = q.bits() as i64;
    let lsb_exp = (MIN_EXP - shift + q_bits - 53).max(MIN_EXP);
    let drop = (lsb_exp - (MIN_EXP - shift)) as usize;

    let mut mantissa = &q >> drop;
    if drop > 0 {
        let rem = &q - (&mantissa << drop);
        let half = BigUint::from(1u8) << (drop - 1);
        let round_up = rem > half || (rem == half && (sticky || mantissa.bit(0)));
        if round_up {
            mantissa += 1u8;
        }
    }
    let mut mantissa = mantissa.to_u64().expect("mantissa fits in 54 bits");
    let mut lsb_exp = lsb_exp;
    if mantissa == 1u64 << 53 {
        mantissa >>= 1;
        lsb_exp += 1;
    }
    if mantissa < (1u64 << 52) {
        // subnormal: LSB exponent is pinned at 2^-1074
        debug_assert_eq!(lsb_exp, MIN_EXP);
        f64::from_bits(mantissa)
    } else {
        let biased = (lsb_exp + 1075) as u64;
        assert!(biased < 0x7ff, "mean overflows f64");
        f64::from_bits((biased << 52) | (mantissa - (1u64 << 52)))
    }
}

/// Correctly rounded mean of finite non-negative values; `None` when empty.
pub fn exact_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(BigUint::zero(), |acc, &x| acc + to_scaled(x));
    let den = BigUint::from(values.len());
    Some(round_ratio(&sum, &den))
}

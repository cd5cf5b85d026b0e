//! Order-independent floating-point summation.
//!
//! [`ExactSum`] accumulates `f64` terms into a fixed-point integer wide enough
//! to hold every finite double without rounding. Integer addition is
//! associative, so the rounded result depends only on the multiset of terms:
//! a dot product split across any number of shards and merged in any order
//! rounds to the same bits as the unsplit one.

use std::ops::AddAssign;

const DIGIT_BITS: u32 = 32;
const DIGIT_MASK: i64 = (1 << DIGIT_BITS) - 1;
/// Bit position of 2^-1074 (the smallest subnormal) is 0.
const BIAS: i32 = 1074;
/// Covers bit positions up to 2^1024 plus carry headroom.
const DIGITS: usize = 68;
/// Each term adds < 2^32 per digit; renormalize well before i64 overflow.
const RENORM_EVERY: u32 = 1 << 30;

#[derive(Clone)]
pub struct ExactSum {
    digits: [i64; DIGITS],
    pending: u32,
    non_finite: Option<u64>,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ExactSum({:e})", self.value())
    }
}

impl ExactSum {
    /// 64-bit words needed to ship one accumulator between workers.
    pub const WIRE_WORDS: usize = DIGITS;

    pub fn new() -> Self {
        Self {
            digits: [0; DIGITS],
            pending: 0,
            non_finite: None,
        }
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.absorb_non_finite(x);
            return;
        }
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let biased_exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        // value = mantissa * 2^(exp), exp relative to 2^-1074
        let (mantissa, pos) = if biased_exp == 0 {
            (frac, 0)
        } else {
            (frac | (1u64 << 52), biased_exp - 1)
        };
        debug_assert!(pos >= 0 && pos + BIAS >= BIAS);
        let pos = pos as u32;
        let idx = (pos / DIGIT_BITS) as usize;
        let shifted = (mantissa as u128) << (pos % DIGIT_BITS);
        for k in 0..3 {
            let piece = ((shifted >> (DIGIT_BITS * k)) as i64) & DIGIT_MASK;
            if piece != 0 {
                if negative {
                    self.digits[idx + k as usize] -= piece;
                } else {
                    self.digits[idx + k as usize] += piece;
                }
            }
        }
        self.bump();
    }

    /// Adds the product `a * b` rounded once to f64.
    #[inline]
    pub fn add_product(&mut self, a: f64, b: f64) {
        self.add(a * b);
    }

    fn absorb_non_finite(&mut self, x: f64) {
        // NaN dominates; opposite infinities make NaN.
        self.non_finite = Some(match self.non_finite.map(f64::from_bits) {
            None => x.to_bits(),
            Some(prev) => (prev + x).to_bits(),
        });
    }

    fn bump(&mut self) {
        self.pending += 1;
        if self.pending >= RENORM_EVERY {
            self.normalize();
        }
    }

    /// Propagates carries so every digit but the top lies in `[0, 2^32)`.
    fn normalize(&mut self) {
        for i in 0..DIGITS - 1 {
            let carry = self.digits[i] >> DIGIT_BITS;
            self.digits[i] -= carry << DIGIT_BITS;
            self.digits[i + 1] += carry;
        }
        self.pending = 0;
    }

    /// Rounds the exact sum to the nearest double (ties to even). Results in
    /// the subnormal range may be rounded twice; they are still a pure
    /// function of the exact sum.
    pub fn value(&self) -> f64 {
        if let Some(bits) = self.non_finite {
            return f64::from_bits(bits);
        }
        let mut acc = self.clone();
        acc.normalize();
        let negative = acc.digits[DIGITS - 1] < 0;
        if negative {
            for d in acc.digits.iter_mut() {
                *d = -*d;
            }
            acc.normalize();
        }
        let Some(top) = acc.digits.iter().rposition(|&d| d != 0) else {
            return 0.0;
        };
        if acc.digits[top] >> DIGIT_BITS != 0 {
            return if negative { f64::NEG_INFINITY } else { f64::INFINITY };
        }
        let mut mant: u128 = 0;
        let lowest = top.saturating_sub(3);
        for i in (lowest..=top).rev() {
            mant = (mant << DIGIT_BITS) | acc.digits[i] as u128;
        }
        mant <<= DIGIT_BITS * (3 - (top - lowest) as u32);
        if acc.digits[..lowest].iter().any(|&d| d != 0) {
            mant |= 1;
        }
        let exp = (lowest as i32 - (3 - (top - lowest) as i32)) * DIGIT_BITS as i32 - BIAS;
        let magnitude = scale_by_pow2(mant as f64, exp);
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

impl AddAssign<&ExactSum> for ExactSum {
    fn add_assign(&mut self, rhs: &ExactSum) {
        if let Some(bits) = rhs.non_finite {
            self.absorb_non_finite(f64::from_bits(bits));
        }
        let mut other = rhs.clone();
        other.normalize();
        self.normalize();
        for (a, b) in self.digits.iter_mut().zip(other.digits.iter()) {
            *a += *b;
        }
        self.pending = 1;
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = ExactSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

fn scale_by_pow2(mut x: f64, mut exp: i32) -> f64 {
    const STEP: i32 = 960;
    while exp > STEP {
        x *= f64::powi(2.0, STEP);
        exp -= STEP;
    }
    while exp < -STEP {
        x *= f64::powi(2.0, -STEP);
        exp += STEP;
    }
    x * f64::powi(2.0, exp)
}

/// Order-independent dot product, rounded once from the exact sum of the
/// elementwise (rounded) products.
pub fn exact_dot(a: &[f64], b: &[f64]) -> ExactSum {
    let mut acc = ExactSum::new();
    for (&x, &y) in a.iter().zip(b) {
        acc.add_product(x, y);
    }
    acc
}

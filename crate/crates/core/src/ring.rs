//! Arithmetic in Z_{2^64} and the fixed-point codec layered on top of it.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit width of the ring.
pub const RING_BITS: u32 = 64;

/// A residue modulo 2^64. Arithmetic wraps; values at or above 2^63 read as
/// negative under the two's-complement view.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(transparent)]
pub struct RingElem(pub u64);

impl RingElem {
    pub const ZERO: RingElem = RingElem(0);
    pub const ONE: RingElem = RingElem(1);

    #[inline]
    pub fn from_signed(v: i64) -> Self {
        RingElem(v as u64)
    }

    #[inline]
    pub fn signed(self) -> i64 {
        self.0 as i64
    }

    #[inline]
    pub fn msb(self) -> bool {
        self.0 >> 63 == 1
    }

    #[inline]
    pub fn bit(self, i: u32) -> bool {
        (self.0 >> i) & 1 == 1
    }
}

impl fmt::Debug for RingElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({})", self.signed())
    }
}

impl fmt::Display for RingElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for RingElem {
    fn from(v: u64) -> Self {
        RingElem(v)
    }
}

impl Add for RingElem {
    type Output = RingElem;
    #[inline]
    fn add(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingElem {
    type Output = RingElem;
    #[inline]
    fn sub(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_sub(rhs.0))
    }
}

impl Mul for RingElem {
    type Output = RingElem;
    #[inline]
    fn mul(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingElem {
    type Output = RingElem;
    #[inline]
    fn neg(self) -> RingElem {
        RingElem(self.0.wrapping_neg())
    }
}

impl AddAssign for RingElem {
    #[inline]
    fn add_assign(&mut self, rhs: RingElem) {
        *self = *self + rhs;
    }
}

impl SubAssign for RingElem {
    #[inline]
    fn sub_assign(&mut self, rhs: RingElem) {
        *self = *self - rhs;
    }
}

impl MulAssign for RingElem {
    #[inline]
    fn mul_assign(&mut self, rhs: RingElem) {
        *self = *self * rhs;
    }
}

impl Sum for RingElem {
    fn sum<I: Iterator<Item = RingElem>>(iter: I) -> RingElem {
        iter.fold(RingElem::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a RingElem> for RingElem {
    fn sum<I: Iterator<Item = &'a RingElem>>(iter: I) -> RingElem {
        iter.fold(RingElem::ZERO, |a, b| a + *b)
    }
}

/// Which half of a two-party sharing a local operation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShareRole {
    First,
    Second,
}

/// Fixed-point encoding with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedCodec {
    pub frac_bits: u32,
}

impl Default for FixedCodec {
    fn default() -> Self {
        FixedCodec { frac_bits: 15 }
    }
}

impl FixedCodec {
    pub fn new(frac_bits: u32) -> Self {
        assert!(frac_bits < 31, "fractional bits must leave room for products");
        FixedCodec { frac_bits }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Largest magnitude accepted by [`FixedCodec::encode`].
    pub fn bound(&self) -> f64 {
        2f64.powi((RING_BITS - 1 - self.frac_bits) as i32)
    }

    /// Rounds half away from zero, then wraps negatives into the ring.
    pub fn encode(&self, x: f64) -> Result<RingElem> {
        if !x.is_finite() || x.abs() >= self.bound() {
            return Err(Error::Range(x));
        }
        Ok(RingElem::from_signed((x * self.scale()).round() as i64))
    }

    /// Encoding of a public constant the caller knows to be in range.
    pub fn constant(&self, x: f64) -> RingElem {
        self.encode(x)
            .unwrap_or_else(|_| panic!("constant {x} not representable with {} fractional bits", self.frac_bits))
    }

    pub fn encode_all(&self, xs: &[f64]) -> Result<Vec<RingElem>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    #[inline]
    pub fn decode(&self, e: RingElem) -> f64 {
        e.signed() as f64 / self.scale()
    }

    pub fn decode_all(&self, es: &[RingElem]) -> Vec<f64> {
        es.iter().map(|&e| self.decode(e)).collect()
    }

    /// Local truncation of one share of a value carrying 2t fractional bits.
    /// The first party shifts its share; the second negates, shifts and
    /// negates back, so the two results reconstruct to the shifted value up
    /// to one unit in the last place (barring a wrap of probability about
    /// |x| / 2^(64 - 2t)).
    #[inline]
    pub fn trunc_local(&self, e: RingElem, role: ShareRole) -> RingElem {
        trunc_share(e, self.frac_bits, role)
    }

    /// Plaintext truncation matching the shared version on reconstructed values.
    #[inline]
    pub fn trunc_plain(&self, e: RingElem) -> RingElem {
        RingElem::from_signed(e.signed() >> self.frac_bits)
    }
}

#[inline]
pub fn trunc_share(e: RingElem, bits: u32, role: ShareRole) -> RingElem {
    match role {
        ShareRole::First => RingElem(e.0 >> bits),
        ShareRole::Second => -RingElem((-e).0 >> bits),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn split_trunc(codec: &FixedCodec, v: RingElem, mask: u64) -> RingElem {
        let s2 = RingElem(mask);
        let s1 = v - s2;
        codec.trunc_local(s1, ShareRole::First) + codec.trunc_local(s2, ShareRole::Second)
    }

    #[test]
    fn encode_examples() {
        let c = FixedCodec::default();
        assert_eq!(c.encode(1.0).unwrap(), RingElem(32768));
        assert_eq!(c.encode(-0.5).unwrap(), RingElem(u64::MAX - 16384 + 1));
        assert_eq!(c.encode(0.0).unwrap(), RingElem(0));
        assert!(matches!(c.encode(2f64.powi(48)), Err(Error::Range(_))));
        assert!(c.encode(f64::NAN).is_err());
    }

    #[test]
    fn encode_rounds_half_away_from_zero() {
        let c = FixedCodec::default();
        let half_ulp = 0.5 / c.scale();
        assert_eq!(c.encode(half_ulp).unwrap(), RingElem(1));
        assert_eq!(c.encode(-half_ulp).unwrap(), RingElem::from_signed(-1));
    }

    #[test]
    fn decode_examples() {
        let c = FixedCodec::default();
        assert_eq!(c.decode(RingElem(32768)), 1.0);
        assert_eq!(c.decode(RingElem(u64::MAX - 16384 + 1)), -0.5);
        assert_eq!(c.decode(RingElem(49152)), 1.5);
    }

    #[test]
    fn truncation_over_random_splits() {
        let c = FixedCodec::default();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let cases = [(2.0, 3.0, 6.0), (-1.5, 2.0, -3.0), (0.0, 0.0, 0.0)];
        for (a, b, want) in cases {
            let prod = c.encode(a).unwrap() * c.encode(b).unwrap();
            for _ in 0..1000 {
                let got = split_trunc(&c, prod, rng.gen());
                let err = (got - c.encode(want).unwrap()).signed().abs();
                assert!(err <= 1, "{a}*{b}: off by {err} ulp");
            }
        }
    }

    #[test]
    fn wraparound_arithmetic() {
        assert_eq!(RingElem(u64::MAX) + RingElem(2), RingElem(1));
        assert_eq!(RingElem(0) - RingElem(1), RingElem(u64::MAX));
        assert!(RingElem::from_signed(-3).msb());
        assert_eq!(-RingElem(5), RingElem::from_signed(-5));
    }

    proptest! {
        #[test]
        fn add_within_two_ulps(x in -1.0e9f64..1.0e9, y in -1.0e9f64..1.0e9) {
            let c = FixedCodec::default();
            let sum = c.decode(c.encode(x).unwrap() + c.encode(y).unwrap());
            prop_assert!((sum - (x + y)).abs() <= 2f64.powi(-14));
        }

        #[test]
        fn encode_decode_within_half_ulp(x in -1.0e12f64..1.0e12) {
            let c = FixedCodec::default();
            prop_assert!((c.decode(c.encode(x).unwrap()) - x).abs() <= 2f64.powi(-16) + 1e-12 * x.abs());
        }

        #[test]
        fn encode_injective_on_grid(a in any::<i32>(), b in any::<i32>()) {
            let c = FixedCodec::default();
            let (x, y) = (a as f64 / c.scale(), b as f64 / c.scale());
            prop_assert_eq!(a == b, c.encode(x).unwrap() == c.encode(y).unwrap());
        }

        #[test]
        fn truncated_product_error(x in -32.0f64..32.0, y in -32.0f64..32.0, mask in any::<u64>()) {
            // Encoded operands stay below 2^20 in magnitude.
            let c = FixedCodec::default();
            let (ex, ey) = (c.encode(x).unwrap(), c.encode(y).unwrap());
            let got = c.decode(split_trunc(&c, ex * ey, mask));
            let want = c.decode(ex) * c.decode(ey);
            prop_assert!((got - want).abs() <= 2.0 * 2f64.powi(-15));
        }
    }
}

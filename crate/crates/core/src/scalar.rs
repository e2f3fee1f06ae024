//! Floating point scalar abstraction shared by every numeric routine.

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Real scalar usable by tensors, activations, quantizers and the spike path: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to nearest for narrower types.
    fn lit(v: f64) -> Self;

    /// `self * 2^e` through exponent-field manipulation, never a multiply.
    ///
    /// Exact whenever the result is a normal number; subnormal results are
    /// rounded half to even, which is what the hardware multiply would do.
    fn ldexp(self, e: i32) -> Self;

    /// Round to nearest integer, ties to even.
    fn round_half_even(self) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bits:ty, $mant:expr, $exp_mask:expr, $bias:expr) => {
        impl Scalar for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            fn ldexp(self, e: i32) -> Self {
                if self == 0.0 || !self.is_finite() || e == 0 {
                    return self;
                }
                let bits = self.to_bits();
                let sign = bits & (1 << ($mant + ($exp_mask as u32).count_ones()));
                let raw_exp = ((bits >> $mant) & $exp_mask) as i32;
                let frac = bits & ((1 << $mant) - 1);
                // Normalize to (mantissa with implicit bit, unbiased exponent of the lsb).
                let (mut m, mut exp) = if raw_exp == 0 {
                    let lz = frac.leading_zeros() as i32 - (<$bits>::BITS as i32 - $mant - 1);
                    (frac << lz, 1 - $bias - $mant as i32 - lz)
                } else {
                    (frac | (1 << $mant), raw_exp - $bias - $mant as i32)
                };
                exp += e;
                let max_exp = $exp_mask as i32 - 1 - $bias - $mant as i32;
                let min_normal = 1 - $bias - $mant as i32;
                if exp > max_exp {
                    return if sign != 0 { <$t>::NEG_INFINITY } else { <$t>::INFINITY };
                }
                if exp >= min_normal {
                    let biased = (exp + $bias + $mant as i32) as $bits;
                    return <$t>::from_bits(sign | (biased << $mant) | (m & ((1 << $mant) - 1)));
                }
                // Subnormal: shift right with round-half-even.
                let shift = (min_normal - exp) as u32;
                if shift > $mant + 1 {
                    return <$t>::from_bits(sign);
                }
                let rem = m & ((1 << shift) - 1);
                let half = 1 << (shift - 1);
                m >>= shift;
                if rem > half || (rem == half && (m & 1) == 1) {
                    m += 1;
                }
                <$t>::from_bits(sign | m)
            }

            #[inline]
            fn round_half_even(self) -> Self {
                self.round_ties_even()
            }
        }
    };
}

impl_scalar!(f64, u64, 52, 0x7ffu64, 1023);
impl_scalar!(f32, u32, 23, 0xffu32, 127);

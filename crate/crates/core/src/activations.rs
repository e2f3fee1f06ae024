//! Softplus / SiLU and their power-of-two approximations.
//!
//! `pt_softplus(x) = 2^x` below `x_c`, `x + C` above; `pt_silu(x) = -2^x`
//! below `x̄_c`, `2^(-x-1) + x + C̄` above. All four constants come from
//! their closed forms so both functions are C¹ at the breakpoints to within
//! rounding.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Breakpoints and offsets of the two piecewise approximations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PtConstants<T> {
    /// PTSoftplus breakpoint, `log2(1 / ln 2)`.
    pub x_c: T,
    /// PTSoftplus offset, `1 / ln 2 - x_c`.
    pub c: T,
    /// PTSiLU breakpoint, `log2((sqrt(1 + 2 ln²2) - 1) / (2 ln 2))`.
    pub x_bar_c: T,
    /// PTSiLU offset, `-sqrt(1 + 2 ln²2) / ln 2 - x̄_c`.
    pub c_bar: T,
}

impl<T: Scalar> PtConstants<T> {
    pub fn new() -> Self {
        let ln2 = T::LN_2();
        let one = T::one();
        let two = one + one;
        let x_c = (one / ln2).log2();
        let root = (one + two * ln2 * ln2).sqrt();
        let x_bar_c = ((root - one) / (two * ln2)).log2();
        Self {
            x_c,
            c: one / ln2 - x_c,
            x_bar_c,
            c_bar: -root / ln2 - x_bar_c,
        }
    }
}

impl<T: Scalar> Default for PtConstants<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_grad<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

/// `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn pt_softplus<T: Scalar>(x: T) -> T {
    let k = PtConstants::<T>::new();
    if x < k.x_c {
        pt_softplus_left(x)
    } else {
        pt_softplus_right(x, &k)
    }
}

#[inline]
pub fn pt_softplus_left<T: Scalar>(x: T) -> T {
    x.exp2()
}

#[inline]
pub fn pt_softplus_right<T: Scalar>(x: T, k: &PtConstants<T>) -> T {
    x + k.c
}

pub fn pt_softplus_grad<T: Scalar>(x: T) -> T {
    let k = PtConstants::<T>::new();
    if x < k.x_c {
        pt_softplus_grad_left(x)
    } else {
        T::one()
    }
}

#[inline]
pub fn pt_softplus_grad_left<T: Scalar>(x: T) -> T {
    T::LN_2() * x.exp2()
}

pub fn pt_silu<T: Scalar>(x: T) -> T {
    let k = PtConstants::<T>::new();
    if x < k.x_bar_c {
        pt_silu_left(x)
    } else {
        pt_silu_right(x, &k)
    }
}

#[inline]
pub fn pt_silu_left<T: Scalar>(x: T) -> T {
    -x.exp2()
}

#[inline]
pub fn pt_silu_right<T: Scalar>(x: T, k: &PtConstants<T>) -> T {
    (-x - T::one()).exp2() + x + k.c_bar
}

pub fn pt_silu_grad<T: Scalar>(x: T) -> T {
    let k = PtConstants::<T>::new();
    if x < k.x_bar_c {
        pt_silu_grad_left(x)
    } else {
        pt_silu_grad_right(x)
    }
}

#[inline]
pub fn pt_silu_grad_left<T: Scalar>(x: T) -> T {
    -T::LN_2() * x.exp2()
}

#[inline]
pub fn pt_silu_grad_right<T: Scalar>(x: T) -> T {
    T::one() - T::LN_2() * (-x - T::one()).exp2()
}

/// Largest absolute gap on a grid and where it occurred.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gap {
    pub max: f64,
    pub argmax: f64,
}

impl Gap {
    fn update(&mut self, x: f64, gap: f64) {
        if gap > self.max {
            self.max = gap;
            self.argmax = x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapPair {
    pub value: Gap,
    pub derivative: Gap,
}

/// Sup-norm gaps between each approximation and its reference on a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviationReport {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub points: usize,
    pub softplus: GapPair,
    pub silu: GapPair,
}

/// Evaluates both approximations against their references on the inclusive
/// grid `lo, lo + step, ..., hi`.
pub fn verify_deviation_bounds(lo: f64, hi: f64, step: f64) -> Result<DeviationReport> {
    if !(step > 0.0) || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "deviation grid needs lo < hi and step > 0, got [{lo}, {hi}] step {step}"
        )));
    }
    let steps = ((hi - lo) / step + 1e-9).floor() as usize;
    let zero = Gap { max: -1.0, argmax: lo };
    let mut sp = GapPair { value: zero, derivative: zero };
    let mut si = sp;
    for i in 0..=steps {
        let x = lo + i as f64 * step;
        sp.value.update(x, (pt_softplus(x) - softplus(x)).abs());
        sp.derivative.update(x, (pt_softplus_grad(x) - softplus_grad(x)).abs());
        si.value.update(x, (pt_silu(x) - silu(x)).abs());
        si.derivative.update(x, (pt_silu_grad(x) - silu_grad(x)).abs());
    }
    Ok(DeviationReport {
        lo,
        hi,
        step,
        points: steps + 1,
        softplus: sp,
        silu: si,
    })
}

impl fmt::Display for DeviationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid [{}, {}] step {} ({} points)", self.lo, self.hi, self.step, self.points)?;
        for (name, pair) in [("pt_softplus", &self.softplus), ("pt_silu", &self.silu)] {
            writeln!(
                f,
                "{name} value_gap {:.6} at x={:.4}  derivative_gap {:.6} at x={:.4}",
                pair.value.max, pair.value.argmax, pair.derivative.max, pair.derivative.argmax
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn constants_match_reported_decimals() {
        let k = PtConstants::<f64>::new();
        assert!((k.x_c - 0.5288).abs() <= 5e-4);
        assert!((k.c - 0.9139).abs() <= 5e-4);
        assert!((k.x_bar_c + 1.7920).abs() <= 5e-4);
        assert!((k.c_bar + 0.2282).abs() <= 5e-4);
        let k32 = PtConstants::<f32>::new();
        assert!((k32.x_c as f64 - k.x_c).abs() < 1e-6);
    }

    #[test]
    fn reference_functions() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0f64) - 100.0).abs() < 1e-12);
        assert!(softplus(-100.0f64) < 1e-40);
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(50.0f64) - 50.0).abs() < 1e-12);
        assert!(silu(-50.0f64).abs() < 1e-18);
    }

    #[test]
    fn pt_softplus_values() {
        let k = PtConstants::<f64>::new();
        let inv_ln2 = 1.0 / std::f64::consts::LN_2;
        assert!((pt_softplus_left(k.x_c) - inv_ln2).abs() <= 1e-12);
        assert!((pt_softplus_right(k.x_c, &k) - inv_ln2).abs() <= 1e-12);
        assert_eq!(pt_softplus(0.0f64), 1.0);
        assert!((pt_softplus(2.0f64) - (2.0 + k.c)).abs() < 1e-15);
        assert!((pt_softplus(2.0f64) - 2.9139).abs() < 1e-4);
    }

    #[test]
    fn pt_softplus_grad_values() {
        let k = PtConstants::<f64>::new();
        assert!((pt_softplus_grad_left(k.x_c) - 1.0).abs() <= 1e-12);
        assert_eq!(pt_softplus_grad(k.x_c), 1.0);
        assert_eq!(pt_softplus_grad(10.0f64), 1.0);
        assert!((pt_softplus_grad(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pt_silu_values() {
        let k = PtConstants::<f64>::new();
        let ln2 = std::f64::consts::LN_2;
        let expected = (1.0 - (1.0 + 2.0 * ln2 * ln2).sqrt()) / (2.0 * ln2);
        assert!((pt_silu_left(k.x_bar_c) - expected).abs() <= 1e-12);
        assert!((pt_silu_right(k.x_bar_c, &k) - expected).abs() <= 1e-12);
        assert!((expected + 0.2888).abs() < 1e-4);
        let v = pt_silu(-100.0f64);
        assert!(v < 0.0 && v > -1e-29);
        assert!((pt_silu(10.0f64) - (2f64.powi(-11) + 10.0 + k.c_bar)).abs() < 1e-14);
        assert!((pt_silu(10.0f64) - 9.7723).abs() < 1e-4);
    }

    #[test]
    fn pt_silu_grad_values() {
        let k = PtConstants::<f64>::new();
        let common = (1.0 - 1.960906f64.sqrt()) / 2.0;
        assert!((pt_silu_grad_left(k.x_bar_c) - pt_silu_grad_right(k.x_bar_c)).abs() <= 1e-12);
        assert!((pt_silu_grad_right(k.x_bar_c) - common).abs() < 1e-6);
        assert!((common + 0.2002).abs() < 1e-4);
        assert!((pt_silu_grad(60.0f64) - 1.0).abs() < 1e-15);
        let g = pt_silu_grad(-60.0f64);
        assert!(g < 0.0 && g > -1e-17);
    }

    #[test]
    fn deviation_bounds_hold() {
        let r = verify_deviation_bounds(-10.0, 10.0, 0.001).unwrap();
        assert_eq!(r.points, 20001);
        assert!(r.softplus.value.max <= 0.914, "{r}");
        assert!(r.softplus.derivative.max <= 0.371, "{r}");
        assert!(r.silu.value.max <= 0.316, "{r}");
        assert!(r.silu.derivative.max <= 0.263, "{r}");

        let near0 = verify_deviation_bounds(-1e-3, 1e-3, 1e-3).unwrap();
        let gap0 = (1.0 - std::f64::consts::LN_2).abs();
        assert!((near0.softplus.value.max - gap0).abs() < 1e-3);
        assert!(verify_deviation_bounds(1.0, 0.0, 0.1).is_err());
        assert!(verify_deviation_bounds(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn softplus_gap_monotone_and_dominating() {
        let mut prev_gap = f64::NEG_INFINITY;
        let mut prev_val = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let x = -20.0 + i as f64 * 0.01;
            let v = pt_softplus(x);
            assert!(v > 0.0);
            assert!(v >= prev_val);
            let gap = v - softplus(x);
            assert!(gap >= -1e-15, "x={x}");
            assert!(gap >= prev_gap - 1e-15, "x={x}");
            prev_gap = gap;
            prev_val = v;
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let k = PtConstants::<f64>::new();
        for i in 0..400 {
            let x = -8.0 + i as f64 * 0.04 + 0.0013;
            if (x - k.x_c).abs() >= 1e-2 {
                let a = pt_softplus_grad(x);
                let n = fd(pt_softplus, x);
                assert!((a - n).abs() <= 1e-6 * a.abs().max(1e-3), "x={x}: {a} vs {n}");
            }
            if (x - k.x_bar_c).abs() >= 1e-2 {
                let a = pt_silu_grad(x);
                let n = fd(pt_silu, x);
                assert!((a - n).abs() <= 1e-6 * a.abs().max(1e-3), "x={x}: {a} vs {n}");
            }
            let a = silu_grad(x);
            assert!((a - fd(silu, x)).abs() <= 1e-6 * a.abs().max(1e-3));
            let a = softplus_grad(x);
            assert!((a - fd(softplus, x)).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn integer_powers_are_exact() {
        for e in -40..=0 {
            assert_eq!(pt_softplus(e as f64), 1.0f64.ldexp(e));
        }
    }
}

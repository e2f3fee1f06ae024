//! Learned step-size uniform quantization with straight-through gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest step size an optimizer step may leave behind.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Codes in `[-2^(b-1), 2^(b-1) - 1]`, offset pinned at zero.
    Symmetric,
    /// Codes in `[0, 2^b - 1]` with a trainable offset.
    Asymmetric,
}

/// How rounding sites behave in the forward pass.
///
/// `Relaxed` replaces every round with the identity. The straight-through
/// backward rules are then the exact derivatives of the forward, which is
/// what finite-difference gradient checks compare against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Nearest,
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams<T> {
    pub alpha: T,
    pub beta: T,
    pub bits: u32,
    pub mode: QuantMode,
}

impl<T: Scalar> QuantizerParams<T> {
    pub fn new(alpha: T, beta: T, bits: u32, mode: QuantMode) -> Result<Self> {
        let q = Self { alpha, beta, bits, mode };
        q.validate()?;
        Ok(q)
    }

    pub fn asymmetric(alpha: T, beta: T, bits: u32) -> Result<Self> {
        Self::new(alpha, beta, bits, QuantMode::Asymmetric)
    }

    pub fn symmetric(alpha: T, bits: u32) -> Result<Self> {
        Self::new(alpha, T::zero(), bits, QuantMode::Symmetric)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=24).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!("bit width {} outside 1..=24", self.bits)));
        }
        if !(self.alpha > T::zero()) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || (self.mode == QuantMode::Symmetric && self.beta != T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "offset {} invalid for {:?} quantizer",
                self.beta, self.mode
            )));
        }
        Ok(())
    }

    pub fn qn(&self) -> i64 {
        match self.mode {
            QuantMode::Symmetric => -(1i64 << (self.bits - 1)),
            QuantMode::Asymmetric => 0,
        }
    }

    pub fn qp(&self) -> i64 {
        match self.mode {
            QuantMode::Symmetric => (1i64 << (self.bits - 1)) - 1,
            QuantMode::Asymmetric => (1i64 << self.bits) - 1,
        }
    }

    /// Lowest and highest representable dequantized values.
    pub fn range(&self) -> (T, T) {
        (self.dequantize(self.qn()), self.dequantize(self.qp()))
    }

    #[inline]
    pub fn dequantize(&self, code: i64) -> T {
        self.alpha * T::from_i64(code).unwrap() + self.beta
    }

    #[inline]
    fn normalized(&self, x: T) -> T {
        (x - self.beta) / self.alpha
    }

    /// Real-valued code under the given rounding; integral for `Nearest`.
    #[inline]
    pub fn code_real(&self, x: T, rounding: Rounding) -> T {
        let v = self.normalized(x);
        let r = match rounding {
            Rounding::Nearest => v.round(),
            Rounding::Relaxed => v,
        };
        let lo = T::from_i64(self.qn()).unwrap();
        let hi = T::from_i64(self.qp()).unwrap();
        r.max(lo).min(hi)
    }

    /// Integer code, rounding half away from zero.
    #[inline]
    pub fn code(&self, x: T) -> i64 {
        self.code_real(x, Rounding::Nearest).to_i64().unwrap()
    }

    /// Clamps trainable state back into the valid region after an optimizer step.
    pub fn clamp_after_step(&mut self, beta_floor: Option<T>) {
        let floor = T::lit(ALPHA_FLOOR);
        if !(self.alpha >= floor) {
            self.alpha = floor;
        }
        if self.mode == QuantMode::Symmetric {
            self.beta = T::zero();
        } else if let Some(f) = beta_floor {
            if !(self.beta >= f) {
                self.beta = f;
            }
        }
    }
}

/// `x_q = α · clip(round((x − β)/α), Qn, Qp) + β` with its integer codes.
pub fn quantize<T: Scalar>(x: &Tensor<T>, q: &QuantizerParams<T>) -> (Tensor<T>, Vec<i64>) {
    let codes: Vec<i64> = x.data().iter().map(|&v| q.code(v)).collect();
    let vals = codes.iter().map(|&c| q.dequantize(c)).collect();
    (Tensor::new(x.shape(), vals).unwrap(), codes)
}

/// Dequantized values under the given rounding.
pub fn quantize_values<T: Scalar>(x: &Tensor<T>, q: &QuantizerParams<T>, rounding: Rounding) -> Tensor<T> {
    x.map(|v| q.alpha * q.code_real(v, rounding) + q.beta)
}

/// Codes (as reals) under the given rounding.
pub fn quantize_codes<T: Scalar>(x: &Tensor<T>, q: &QuantizerParams<T>, rounding: Rounding) -> Tensor<T> {
    x.map(|v| q.code_real(v, rounding))
}

/// Step-size initializer: mean of the entries `≥ 0.5`, falling back to
/// `max(mean|x|, 1e-3)` when there are none.
pub fn init_alpha<T: Scalar>(x: &Tensor<T>) -> T {
    let half = T::lit(0.5);
    let (sum, n) = x
        .data()
        .iter()
        .filter(|&&v| v >= half)
        .fold((T::zero(), 0usize), |(s, n), &v| (s + v, n + 1));
    if n > 0 {
        return sum / T::from_usize(n).unwrap();
    }
    let mean_abs = if x.is_empty() {
        T::zero()
    } else {
        x.data().iter().map(|v| v.abs()).sum::<T>() / T::from_usize(x.len()).unwrap()
    };
    mean_abs.max(T::lit(1e-3))
}

/// Everything a quantizer forward keeps for its backward.
#[derive(Clone, Debug)]
pub struct QuantForward<T> {
    pub x: Tensor<T>,
    pub codes: Vec<i64>,
    pub params: QuantizerParams<T>,
}

pub fn quantize_forward<T: Scalar>(x: &Tensor<T>, q: &QuantizerParams<T>) -> (Tensor<T>, QuantForward<T>) {
    let (xq, codes) = quantize(x, q);
    (
        xq,
        QuantForward {
            x: x.clone(),
            codes,
            params: *q,
        },
    )
}

/// Straight-through gradients `(dx, dα, dβ)` of the dequantized output.
pub fn ste_backward<T: Scalar>(grad_out: &Tensor<T>, fwd: &QuantForward<T>) -> Result<(Tensor<T>, T, T)> {
    if grad_out.shape() != fwd.x.shape() {
        return Err(Error::MissingForward);
    }
    Ok(ste_values_backward(grad_out, &fwd.x, &fwd.params, Rounding::Nearest))
}

/// LSQ backward for dequantized outputs.
///
/// Inside the clip range the input gradient passes through and `dα` picks up
/// `round(v) - v`; clipped entries stop the input gradient and contribute
/// `Qn`/`Qp` to `dα` and 1 to `dβ`.
pub fn ste_values_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    q: &QuantizerParams<T>,
    rounding: Rounding,
) -> (Tensor<T>, T, T) {
    let mut ga = T::zero();
    let mut gb = T::zero();
    let gx = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| {
            let (gx, a, b) = ste_value_scalar(g, xv, q, rounding);
            ga += a;
            gb += b;
            gx
        })
        .collect();
    (Tensor::new(x.shape(), gx).unwrap(), ga, gb)
}

/// Single-entry form of [`ste_values_backward`].
#[inline]
pub fn ste_value_scalar<T: Scalar>(g: T, x: T, q: &QuantizerParams<T>, rounding: Rounding) -> (T, T, T) {
    let lo = T::from_i64(q.qn()).unwrap();
    let hi = T::from_i64(q.qp()).unwrap();
    let v = q.normalized(x);
    let (gx, ga, gb) = if v < lo {
        (T::zero(), g * lo, g)
    } else if v > hi {
        (T::zero(), g * hi, g)
    } else if rounding == Rounding::Nearest {
        (g, g * (v.round() - v), T::zero())
    } else {
        (g, T::zero(), T::zero())
    };
    let gb = if q.mode == QuantMode::Symmetric { T::zero() } else { gb };
    (gx, ga, gb)
}

/// Straight-through gradients when the consumer reads the clipped code itself.
pub fn ste_codes_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    q: &QuantizerParams<T>,
) -> (Tensor<T>, T, T) {
    let lo = T::from_i64(q.qn()).unwrap();
    let hi = T::from_i64(q.qp()).unwrap();
    let inv = T::one() / q.alpha;
    let mut ga = T::zero();
    let mut gb = T::zero();
    let gx = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| {
            let v = q.normalized(xv);
            if v < lo || v > hi {
                T::zero()
            } else {
                ga -= g * v * inv;
                gb -= g * inv;
                g * inv
            }
        })
        .collect();
    if q.mode == QuantMode::Symmetric {
        gb = T::zero();
    }
    (Tensor::new(x.shape(), gx).unwrap(), ga, gb)
}

/// Stateful wrapper pairing each backward with the forward that preceded it.
#[derive(Clone, Debug)]
pub struct Quantizer<T> {
    pub params: QuantizerParams<T>,
    last: Option<QuantForward<T>>,
}

impl<T: Scalar> Quantizer<T> {
    pub fn new(params: QuantizerParams<T>) -> Self {
        Self { params, last: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> (Tensor<T>, Vec<i64>) {
        let (xq, fwd) = quantize_forward(x, &self.params);
        let codes = fwd.codes.clone();
        self.last = Some(fwd);
        (xq, codes)
    }

    /// Consumes the saved forward; a second call without a new forward fails.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<(Tensor<T>, T, T)> {
        let fwd = self.last.take().ok_or(Error::MissingForward)?;
        ste_backward(grad_out, &fwd)
    }
}

//! Power-of-two selective scan in real arithmetic, with its reverse pass.

use crate::error::{Error, Result};
use crate::quantize::{ste_value_scalar, QuantizerParams, Rounding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exponents of the transition are clipped to this range.
pub const EXP_MIN: i32 = -32;

/// Sequence inputs of one scan: `delta`, `s` are `[B, L, d]`; `b`, `c` are
/// `[B, L, n]`; `a_log` is `[d, n]`; `d_skip` is `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub delta: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub s: &'a Tensor<T>,
    pub a_log: &'a Tensor<T>,
    pub d_skip: &'a Tensor<T>,
}

/// Quantizers applied to the state (`h`) and the output (`y`) each step.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScanQuant<T> {
    pub h: Option<QuantizerParams<T>>,
    pub y: Option<QuantizerParams<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
}

impl ScanDims {
    pub fn of<T: Scalar>(x: &ScanInputs<'_, T>) -> Result<Self> {
        let [batch, len, d] = *x.delta.shape() else {
            return Err(shape_err(x.delta, x.s));
        };
        let n = x.a_log.last_dim();
        let ok = x.s.shape() == [batch, len, d]
            && x.b.shape() == [batch, len, n]
            && x.c.shape() == [batch, len, n]
            && x.a_log.shape() == [d, n]
            && x.d_skip.shape() == [d];
        if !ok {
            return Err(shape_err(x.delta, x.b));
        }
        Ok(Self { batch, len, d, n })
    }

    #[inline]
    fn seq(&self, b: usize, t: usize, j: usize, width: usize) -> usize {
        (b * self.len + t) * width + j
    }

    #[inline]
    fn state(&self, b: usize, t: usize, d: usize, i: usize) -> usize {
        ((b * self.len + t) * self.d + d) * self.n + i
    }
}

fn shape_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op: "selective_scan",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `A = −exp(A_log)`.
pub fn transition<T: Scalar>(a_log: &Tensor<T>) -> Tensor<T> {
    a_log.map(|v| -v.exp())
}

/// Integer exponent `clip(round_half_even(Δ·A), −32, 0)`.
#[inline]
pub fn exponent<T: Scalar>(u: T) -> i32 {
    let e = u.round_half_even().max(T::from_i32(EXP_MIN).unwrap()).min(T::zero());
    e.to_i32().unwrap()
}

/// Transition factor and whether its exponent sits on the clip.
#[inline]
fn decay<T: Scalar>(u: T, rounding: Rounding) -> (T, bool) {
    let lo = T::from_i32(EXP_MIN).unwrap();
    let clipped = u < lo || u > T::zero();
    match rounding {
        Rounding::Nearest => (T::one().ldexp(exponent(u)), clipped),
        Rounding::Relaxed => (u.max(lo).min(T::zero()).exp2(), clipped),
    }
}

/// Everything the reverse pass needs, laid out `[B, L, d, n]` for the state
/// and `[B, L, d]` for per-channel values.
#[derive(Clone, Debug)]
pub struct ScanForward<T> {
    pub dims: ScanDims,
    pub y: Tensor<T>,
    /// Pre-quantization state `Ā·h + Δ·B·s`.
    pub p: Vec<T>,
    /// State after quantization.
    pub h: Vec<T>,
    /// Pre-quantization output `C·h + D·s`.
    pub r: Vec<T>,
    /// Power-of-two transitions `Ā`.
    pub abar: Vec<T>,
    clipped: Vec<bool>,
    a: Vec<T>,
}

impl<T: Scalar> ScanForward<T> {
    pub fn p_tensor(&self) -> Tensor<T> {
        let ScanDims { batch, len, d, n } = self.dims;
        Tensor::new(&[batch, len, d, n], self.p.clone()).unwrap()
    }

    pub fn r_tensor(&self) -> Tensor<T> {
        let ScanDims { batch, len, d, .. } = self.dims;
        Tensor::new(&[batch, len, d], self.r.clone()).unwrap()
    }

    pub fn h_tensor(&self) -> Tensor<T> {
        let ScanDims { batch, len, d, n } = self.dims;
        Tensor::new(&[batch, len, d, n], self.h.clone()).unwrap()
    }
}

#[inline]
fn q_apply<T: Scalar>(q: &Option<QuantizerParams<T>>, x: T, rounding: Rounding) -> T {
    match q {
        Some(q) => q.alpha * q.code_real(x, rounding) + q.beta,
        None => x,
    }
}

/// Runs the recurrence
/// `h_t = Q_h(Ā_t ⊙ h_{t−1} + Δ_t B_t s_t)`, `y_t = Q_y(C_t · h_t + D s_t)`
/// with `Ā_t = 2^{round(Δ_t A)}` and `h_0 = 0`.
pub fn scan_forward<T: Scalar>(x: &ScanInputs<'_, T>, q: &ScanQuant<T>, rounding: Rounding) -> Result<ScanForward<T>> {
    let dims = ScanDims::of(x)?;
    let ScanDims { batch, len, d, n } = dims;
    let a = transition(x.a_log).into_data();
    let (delta, bm, cm, s, dk) = (x.delta.data(), x.b.data(), x.c.data(), x.s.data(), x.d_skip.data());
    let total = batch * len * d * n;
    let mut p = vec![T::zero(); total];
    let mut h = vec![T::zero(); total];
    let mut abar = vec![T::zero(); total];
    let mut clipped = vec![false; total];
    let mut r = vec![T::zero(); batch * len * d];
    let mut y = vec![T::zero(); batch * len * d];
    for bi in 0..batch {
        for ch in 0..d {
            for t in 0..len {
                let k = dims.seq(bi, t, ch, d);
                let (dt, st) = (delta[k], s[k]);
                let mut acc = T::zero();
                for i in 0..n {
                    let j = dims.state(bi, t, ch, i);
                    let (ab, cl) = decay(dt * a[ch * n + i], rounding);
                    let prev = if t == 0 { T::zero() } else { h[dims.state(bi, t - 1, ch, i)] };
                    let pv = ab * prev + dt * bm[dims.seq(bi, t, i, n)] * st;
                    let hv = q_apply(&q.h, pv, rounding);
                    abar[j] = ab;
                    clipped[j] = cl;
                    p[j] = pv;
                    h[j] = hv;
                    acc += cm[dims.seq(bi, t, i, n)] * hv;
                }
                let rv = acc + dk[ch] * st;
                r[k] = rv;
                y[k] = q_apply(&q.y, rv, rounding);
            }
        }
    }
    Ok(ScanForward {
        dims,
        y: Tensor::new(&[batch, len, d], y)?,
        p,
        h,
        r,
        abar,
        clipped,
        a,
    })
}

/// Gradients of every scan input, plus `(dα, dβ)` of both quantizers.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub s: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub h_q: (T, T),
    pub y_q: (T, T),
}

#[inline]
fn q_back<T: Scalar>(q: &Option<QuantizerParams<T>>, g: T, x: T, rounding: Rounding) -> (T, T, T) {
    match q {
        Some(q) => ste_value_scalar(g, x, q, rounding),
        None => (g, T::zero(), T::zero()),
    }
}

pub fn scan_backward<T: Scalar>(
    grad_y: &Tensor<T>,
    x: &ScanInputs<'_, T>,
    q: &ScanQuant<T>,
    rounding: Rounding,
    fwd: &ScanForward<T>,
) -> Result<ScanGrads<T>> {
    let dims = fwd.dims;
    if grad_y.shape() != fwd.y.shape() {
        return Err(shape_err(grad_y, &fwd.y));
    }
    let ScanDims { batch, len, d, n } = dims;
    let (delta, bm, cm, s, dk) = (x.delta.data(), x.b.data(), x.c.data(), x.s.data(), x.d_skip.data());
    let gy = grad_y.data();
    let ln2 = T::LN_2();
    let mut g_delta = vec![T::zero(); delta.len()];
    let mut g_b = vec![T::zero(); bm.len()];
    let mut g_c = vec![T::zero(); cm.len()];
    let mut g_s = vec![T::zero(); s.len()];
    let mut g_a = vec![T::zero(); d * n];
    let mut g_d = vec![T::zero(); d];
    let (mut hq, mut yq) = ((T::zero(), T::zero()), (T::zero(), T::zero()));
    let mut carry = vec![T::zero(); n];
    for bi in 0..batch {
        for ch in 0..d {
            carry.iter_mut().for_each(|c| *c = T::zero());
            for t in (0..len).rev() {
                let k = dims.seq(bi, t, ch, d);
                let (dt, st) = (delta[k], s[k]);
                let (gr, ga, gb) = q_back(&q.y, gy[k], fwd.r[k], rounding);
                yq.0 += ga;
                yq.1 += gb;
                g_d[ch] += gr * st;
                g_s[k] += gr * dk[ch];
                for i in 0..n {
                    let j = dims.state(bi, t, ch, i);
                    let kb = dims.seq(bi, t, i, n);
                    g_c[kb] += gr * fwd.h[j];
                    let gh = carry[i] + gr * cm[kb];
                    let (gp, ga, gb) = q_back(&q.h, gh, fwd.p[j], rounding);
                    hq.0 += ga;
                    hq.1 += gb;
                    let prev = if t == 0 { T::zero() } else { fwd.h[dims.state(bi, t - 1, ch, i)] };
                    let ab = fwd.abar[j];
                    carry[i] = gp * ab;
                    let bv = bm[kb];
                    g_delta[k] += gp * bv * st;
                    g_b[kb] += gp * dt * st;
                    g_s[k] += gp * dt * bv;
                    if !fwd.clipped[j] {
                        let gu = gp * prev * ln2 * ab;
                        let av = fwd.a[ch * n + i];
                        g_delta[k] += gu * av;
                        // dA/dA_log = A
                        g_a[ch * n + i] += gu * dt * av;
                    }
                }
            }
        }
    }
    Ok(ScanGrads {
        delta: Tensor::new(x.delta.shape(), g_delta)?,
        b: Tensor::new(x.b.shape(), g_b)?,
        c: Tensor::new(x.c.shape(), g_c)?,
        s: Tensor::new(x.s.shape(), g_s)?,
        a_log: Tensor::new(x.a_log.shape(), g_a)?,
        d_skip: Tensor::new(x.d_skip.shape(), g_d)?,
        h_q: hq,
        y_q: yq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{assert_grad_close, finite_diff, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng, batch: usize, len: usize, d: usize, n: usize) -> Vec<Tensor<f64>> {
        vec![
            rand_tensor(rng, &[batch, len, d]).map(|v| 0.2 + v.abs()),
            rand_tensor(rng, &[batch, len, n]),
            rand_tensor(rng, &[batch, len, n]),
            rand_tensor(rng, &[batch, len, d]),
            rand_tensor(rng, &[d, n]),
            rand_tensor(rng, &[d]),
        ]
    }

    fn view(v: &[Tensor<f64>]) -> ScanInputs<'_, f64> {
        ScanInputs {
            delta: &v[0],
            b: &v[1],
            c: &v[2],
            s: &v[3],
            a_log: &v[4],
            d_skip: &v[5],
        }
    }

    #[test]
    fn exponent_rounds_half_even() {
        assert_eq!(exponent(-2.3f64), -2);
        assert_eq!(exponent(-2.5f64), -2);
        assert_eq!(exponent(-3.5f64), -4);
        assert_eq!(exponent(-0.4f64), 0);
        assert_eq!(exponent(-100.0f64), EXP_MIN);
    }

    #[test]
    fn zero_input_keeps_state_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = inputs(&mut rng, 2, 6, 3, 2);
        v[3] = Tensor::zeros(&[2, 6, 3]);
        let fwd = scan_forward(&view(&v), &ScanQuant::default(), Rounding::Nearest).unwrap();
        assert!(fwd.h.iter().all(|&h| h == 0.0));
        assert!(fwd.y.data().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn single_step_has_no_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = inputs(&mut rng, 1, 1, 2, 3);
        let qh = QuantizerParams::asymmetric(0.1, -0.3, 2).unwrap();
        let qy = QuantizerParams::asymmetric(0.2, -0.2, 2).unwrap();
        let q = ScanQuant { h: Some(qh), y: Some(qy) };
        let fwd = scan_forward(&view(&v), &q, Rounding::Nearest).unwrap();
        for ch in 0..2 {
            let (dt, st) = (v[0][ch], v[3][ch]);
            let mut r = v[5][ch] * st;
            for i in 0..3 {
                let h = qh.dequantize(qh.code(dt * v[1][i] * st));
                r += v[2][i] * h;
            }
            assert_eq!(fwd.y[ch], qy.dequantize(qy.code(r)));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = inputs(&mut rng, 2, 5, 3, 2);
        let q = ScanQuant {
            h: Some(QuantizerParams::asymmetric(0.3, -0.9, 2).unwrap()),
            y: Some(QuantizerParams::asymmetric(0.4, -1.0, 2).unwrap()),
        };
        let weights = rand_tensor(&mut rng, &[2, 5, 3]);
        let loss = |v: &[Tensor<f64>]| {
            let f = scan_forward(&view(v), &q, Rounding::Relaxed).unwrap();
            f.y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fwd = scan_forward(&view(&v), &q, Rounding::Relaxed).unwrap();
        let g = scan_backward(&weights, &view(&v), &q, Rounding::Relaxed, &fwd).unwrap();
        let analytic = [&g.delta, &g.b, &g.c, &g.s, &g.a_log, &g.d_skip];
        for (idx, an) in analytic.iter().enumerate() {
            let num = finite_diff(&v[idx], 1e-6, |t| {
                let mut w = v.clone();
                w[idx] = t.clone();
                loss(&w)
            });
            assert_grad_close(an, &num, 1e-5);
        }
    }
}

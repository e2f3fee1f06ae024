//! Average integrate-and-fire spike generation and spike-domain arithmetic.
//!
//! The neuron averages its total drive over the window, then integrates that
//! constant each step and fires (subtracting θ) whenever `V ≥ θ`. Internally
//! the recurrence runs in units of `θ/T`: the per-step increment becomes
//! `drive/θ` and the threshold becomes `T`. For on-grid drives both are small
//! integers, so the count for `drive = m·θ` is exactly `m` in floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{QuantMode, QuantizerParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary spike raster `[T, neurons...]` plus the affine map back to values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain<T> {
    shape: Vec<usize>,
    t_steps: usize,
    bits: Vec<u8>,
    pub theta: T,
    pub scale: T,
    pub offset: T,
}

impl<T: Scalar> SpikeTrain<T> {
    pub fn new(shape: &[usize], t_steps: usize, bits: Vec<u8>, theta: T, scale: T, offset: T) -> Result<Self> {
        let n: usize = shape.iter().product();
        if t_steps == 0 || bits.len() != n * t_steps || bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "spike raster of {} entries does not fit T={t_steps} x {shape:?} binary",
                bits.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            t_steps,
            bits,
            theta,
            scale,
            offset,
        })
    }

    pub fn zeros(shape: &[usize], t_steps: usize, theta: T, scale: T, offset: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            t_steps,
            bits: vec![0; n * t_steps],
            theta,
            scale,
            offset,
        }
    }

    /// Shape of the neuron axes (without the leading time axis).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn spike(&self, t: usize, neuron: usize) -> bool {
        self.bits[t * self.neurons() + neuron] == 1
    }

    pub fn count(&self, neuron: usize) -> usize {
        let n = self.neurons();
        (0..self.t_steps).filter(|&t| self.bits[t * n + neuron] == 1).count()
    }

    pub fn counts(&self) -> Vec<usize> {
        let n = self.neurons();
        let mut c = vec![0; n];
        for row in self.bits.chunks(n.max(1)) {
            for (ci, &b) in c.iter_mut().zip(row) {
                *ci += b as usize;
            }
        }
        c
    }

    pub fn total_spikes(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Fraction of (neuron, step) slots that carry a spike.
    pub fn rate(&self) -> f64 {
        let slots = self.bits.len();
        if slots == 0 {
            0.0
        } else {
            self.total_spikes() as f64 / slots as f64
        }
    }
}

/// Membrane state of a layer of average-IF neurons, in units of `θ/T`.
#[derive(Clone, Debug, PartialEq)]
pub struct IFState<T> {
    /// Membrane potential scaled by `T/θ`.
    pub v: Vec<T>,
    /// Per-step drive scaled by `T/θ` (equals total drive over θ).
    pub a: Vec<T>,
    threshold: T,
}

impl<T: Scalar> IFState<T> {
    /// Neurons with threshold `m·θ` over a window of `t_steps` whose total
    /// drive is `quanta · θ`.
    pub fn from_quanta(quanta: Vec<T>, t_steps: usize, m: usize) -> Self {
        let threshold = T::from_usize(t_steps * m).unwrap();
        Self {
            v: vec![T::zero(); quanta.len()],
            a: quanta,
            threshold,
        }
    }

    pub fn new(drive: &Tensor<T>, t_steps: usize, theta: T) -> Self {
        let quanta = drive.data().iter().map(|&d| snap(d / theta)).collect();
        Self::from_quanta(quanta, t_steps, 1)
    }

    /// One integration step; `out[i]` is set for neurons that fired.
    pub fn step(&mut self, out: &mut [u8]) {
        for ((v, &a), o) in self.v.iter_mut().zip(&self.a).zip(out.iter_mut()) {
            *v += a;
            if *v >= self.threshold {
                *o = 1;
                *v -= self.threshold;
            } else {
                *o = 0;
            }
        }
    }

    /// Membrane potential left in each neuron, in units of θ.
    pub fn residual_quanta(&self, t_steps: usize) -> Vec<T> {
        let t = T::from_usize(t_steps).unwrap();
        self.v.iter().map(|&v| snap(v / t)).collect()
    }
}

/// Snaps values within rounding noise of an integer onto it.
#[inline]
fn snap<T: Scalar>(q: T) -> T {
    let r = q.round();
    let tol = T::epsilon() * T::lit(16.0) * T::one().max(q.abs());
    if (q - r).abs() <= tol {
        r
    } else {
        q
    }
}

fn run_if<T: Scalar>(state: &mut IFState<T>, t_steps: usize) -> Vec<u8> {
    let n = state.a.len();
    let mut bits = vec![0u8; n * t_steps];
    for t in 0..t_steps {
        state.step(&mut bits[t * n..(t + 1) * n]);
    }
    bits
}

/// Average-IF encoding of a total drive per neuron.
///
/// Negative drives never fire; `drive = m·θ` with `0 ≤ m ≤ T` yields exactly
/// `m` spikes.
pub fn average_if_encode<T: Scalar>(drive: &Tensor<T>, t_steps: usize, theta: T) -> Result<SpikeTrain<T>> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument("spike window T must be >= 1".into()));
    }
    if !(theta > T::zero()) {
        return Err(Error::InvalidArgument(format!("threshold must be > 0, got {theta}")));
    }
    let mut state = IFState::new(drive, t_steps, theta);
    let bits = run_if(&mut state, t_steps);
    SpikeTrain::new(drive.shape(), t_steps, bits, theta, theta, T::zero())
}

/// Spike window that makes a `bits`-bit asymmetric code lossless.
pub fn window_for_bits(bits: u32) -> usize {
    (1usize << bits) - 1
}

/// Integer codes of on-grid values; any off-grid entry is an error.
pub fn grid_codes<T: Scalar>(x_q: &Tensor<T>, q: &QuantizerParams<T>) -> Result<Vec<i64>> {
    if q.mode != QuantMode::Asymmetric {
        return Err(Error::InvalidArgument("spike encoding needs an asymmetric quantizer".into()));
    }
    x_q.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = (v - q.beta) / q.alpha;
            let code = k.round();
            let off = (k - code).abs() > T::lit(1e-6);
            let c = code.to_i64().unwrap_or(-1);
            if off || c < q.qn() || c > q.qp() {
                Err(Error::OffGrid {
                    index: i,
                    value: v.as_f64(),
                    alpha: q.alpha.as_f64(),
                    beta: q.beta.as_f64(),
                })
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// Lossless spike encoding of quantized activations: `T = 2^b − 1`, `θ = α`,
/// spike count equal to the quantizer code.
pub fn encode_quantized<T: Scalar>(x_q: &Tensor<T>, q: &QuantizerParams<T>) -> Result<SpikeTrain<T>> {
    let codes = grid_codes(x_q, q)?;
    let t_steps = window_for_bits(q.bits);
    let drive = Tensor::new(
        x_q.shape(),
        codes.iter().map(|&c| T::from_i64(c).unwrap() * q.alpha).collect(),
    )?;
    let mut s = average_if_encode(&drive, t_steps, q.alpha)?;
    s.scale = q.alpha;
    s.offset = q.beta;
    Ok(s)
}

/// `offset + scale · count` per neuron.
pub fn decode<T: Scalar>(s: &SpikeTrain<T>) -> Tensor<T> {
    let vals = s
        .counts()
        .into_iter()
        .map(|c| s.offset + s.scale * T::from_usize(c).unwrap())
        .collect();
    Tensor::new(s.shape(), vals).unwrap()
}

/// Accumulate-only matrix-vector product on a spike train over the last axis.
///
/// Each spike of input `i` adds row `W[i, :]` once; the accumulated sum is
/// then rescaled and the offset term `offset · Σ_i W[i, :]` added. Returns
/// the output and the number of accumulate operations spent on spikes.
pub fn spiking_matvec<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, s: &SpikeTrain<T>) -> Result<(Tensor<T>, u64)> {
    let spikes = SiteSpikes::plain(s.clone());
    spiking_matvec_site(w, None, b, &spikes)
}

/// Threshold configuration of one spike-encoding site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeSiteConfig<T> {
    pub t_steps: usize,
    /// Firing threshold; `gain · scale` after threshold scaling.
    pub theta: T,
    pub scale: T,
    pub offset: T,
    /// Weight multiplier consumers apply to this site's threshold-scaled spikes.
    pub gain: usize,
}

impl<T: Scalar> SpikeSiteConfig<T> {
    pub fn from_quantizer(q: &QuantizerParams<T>) -> Result<Self> {
        if q.mode != QuantMode::Asymmetric {
            return Err(Error::InvalidArgument("spike sites need asymmetric quantizers".into()));
        }
        Ok(Self {
            t_steps: window_for_bits(q.bits),
            theta: q.alpha,
            scale: q.alpha,
            offset: q.beta,
            gain: 1,
        })
    }

    /// Encodes integer codes at this site.
    pub fn encode_codes(&self, shape: &[usize], codes: &[i64]) -> SiteSpikes<T> {
        let quanta: Vec<T> = codes.iter().map(|&c| T::from_i64(c).unwrap()).collect();
        let mut coarse_state = IFState::from_quanta(quanta, self.t_steps, self.gain);
        let coarse_bits = run_if(&mut coarse_state, self.t_steps);
        let coarse = SpikeTrain {
            shape: shape.to_vec(),
            t_steps: self.t_steps,
            bits: coarse_bits,
            theta: self.theta,
            scale: self.scale,
            offset: self.offset,
        };
        let fine = (self.gain > 1).then(|| {
            let residual = coarse_state.residual_quanta(self.t_steps);
            let mut st = IFState::from_quanta(residual, self.t_steps, 1);
            SpikeTrain {
                shape: shape.to_vec(),
                t_steps: self.t_steps,
                bits: run_if(&mut st, self.t_steps),
                theta: self.scale,
                scale: self.scale,
                offset: T::zero(),
            }
        });
        SiteSpikes {
            coarse,
            fine,
            gain: self.gain,
        }
    }
}

/// `θ' = T·θ` on a site and `W' = T·W` for its consumers.
///
/// A saturated neuron (count `T`) then fires once instead of `T` times. The
/// membrane charge left below `θ'` after the window is re-emitted at the
/// original threshold, so decoded values are unchanged for every code.
pub fn threshold_scale<T: Scalar>(cfg: &SpikeSiteConfig<T>, t_steps: usize) -> Result<SpikeSiteConfig<T>> {
    if t_steps < 1 {
        return Err(Error::InvalidArgument("threshold scaling needs T >= 1".into()));
    }
    if t_steps == 1 {
        return Ok(*cfg);
    }
    let t = T::from_usize(t_steps).unwrap();
    Ok(SpikeSiteConfig {
        theta: cfg.theta * t,
        gain: cfg.gain * t_steps,
        ..*cfg
    })
}

/// Spikes emitted by one site: the primary train and, after threshold
/// scaling, the residual train at the base threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpikes<T> {
    pub coarse: SpikeTrain<T>,
    pub fine: Option<SpikeTrain<T>>,
    /// Each coarse spike stands for `gain` base quanta.
    pub gain: usize,
}

impl<T: Scalar> SiteSpikes<T> {
    pub fn plain(s: SpikeTrain<T>) -> Self {
        Self {
            coarse: s,
            fine: None,
            gain: 1,
        }
    }

    pub fn neurons(&self) -> usize {
        self.coarse.neurons()
    }

    pub fn t_steps(&self) -> usize {
        self.coarse.t_steps
    }

    pub fn total_spikes(&self) -> usize {
        self.coarse.total_spikes() + self.fine.as_ref().map_or(0, |f| f.total_spikes())
    }

    pub fn rate(&self) -> f64 {
        let slots = self.neurons() * self.t_steps();
        if slots == 0 {
            0.0
        } else {
            self.total_spikes() as f64 / slots as f64
        }
    }

    /// Per neuron `(coarse_count, fine_count)`.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        let c = self.coarse.counts();
        match &self.fine {
            Some(f) => c.into_iter().zip(f.counts()).collect(),
            None => c.into_iter().map(|k| (k, 0)).collect(),
        }
    }

    /// Spike count of a neuron in base quanta (`gain·coarse + fine`).
    pub fn quanta(&self, neuron: usize) -> usize {
        let f = self.fine.as_ref().map_or(0, |f| f.count(neuron));
        self.gain * self.coarse.count(neuron) + f
    }

    pub fn decode(&self) -> Tensor<T> {
        let vals = self
            .counts()
            .into_iter()
            .map(|(c, f)| self.decode_counts(c, f))
            .collect();
        Tensor::new(self.coarse.shape(), vals).unwrap()
    }

    #[inline]
    pub fn decode_counts(&self, coarse: usize, fine: usize) -> T {
        let s = &self.coarse;
        if self.gain == 1 && fine == 0 {
            s.offset + s.scale * T::from_usize(coarse).unwrap()
        } else {
            let g = T::from_usize(self.gain).unwrap();
            s.offset + s.scale * (g * T::from_usize(coarse).unwrap() + T::from_usize(fine).unwrap())
        }
    }

    /// Accumulates `w_coarse` once per coarse spike and `w` once per fine
    /// spike of a single neuron. Returns the sum and the number of spikes.
    #[inline]
    pub fn accumulate_neuron(&self, neuron: usize, w: T, w_coarse: T) -> (T, usize) {
        let mut acc = T::zero();
        let mut n = 0;
        for t in 0..self.t_steps() {
            if self.coarse.spike(t, neuron) {
                acc += w_coarse;
                n += 1;
            }
        }
        if let Some(f) = &self.fine {
            for t in 0..f.t_steps {
                if f.spike(t, neuron) {
                    acc += w;
                    n += 1;
                }
            }
        }
        (acc, n)
    }

    /// `value · x` for a real `x`, realized as accumulation over the spikes.
    #[inline]
    pub fn times(&self, neuron: usize, x: T, x_coarse: T) -> (T, usize) {
        let (acc, n) = self.accumulate_neuron(neuron, x, x_coarse);
        (self.coarse.scale * acc + self.coarse.offset * x, n)
    }
}

/// [`spiking_matvec`] over a possibly threshold-scaled site.
///
/// `w_coarse` must be `gain · W` when the site is threshold-scaled; it is
/// derived on the fly when omitted.
pub fn spiking_matvec_site<T: Scalar>(
    w: &Tensor<T>,
    w_coarse: Option<&Tensor<T>>,
    b: &Tensor<T>,
    s: &SiteSpikes<T>,
) -> Result<(Tensor<T>, u64)> {
    let (d_in, d_out) = match w.shape() {
        [a, c] => (*a, *c),
        _ => {
            return Err(Error::Shape {
                op: "spiking_matvec",
                lhs: w.shape().to_vec(),
                rhs: s.coarse.shape().to_vec(),
            })
        }
    };
    let neurons = s.neurons();
    if s.coarse.shape().last().copied() != Some(d_in) || b.shape() != [d_out] {
        return Err(Error::Shape {
            op: "spiking_matvec",
            lhs: w.shape().to_vec(),
            rhs: s.coarse.shape().to_vec(),
        });
    }
    let scaled;
    let wc = match (s.gain, w_coarse) {
        (1, _) => w,
        (_, Some(wc)) => wc,
        (g, None) => {
            scaled = w.scale(T::from_usize(g).unwrap());
            &scaled
        }
    };
    let rows = neurons / d_in;
    let mut colsum = vec![T::zero(); d_out];
    for row in w.data().chunks(d_out) {
        for (c, &v) in colsum.iter_mut().zip(row) {
            *c += v;
        }
    }
    let mut out = Vec::with_capacity(rows * d_out);
    let mut accs = 0u64;
    let mut acc = vec![T::zero(); d_out];
    let trains: Vec<(&SpikeTrain<T>, &Tensor<T>)> = std::iter::once((&s.coarse, wc))
        .chain(s.fine.as_ref().map(|f| (f, w)))
        .collect();
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = T::zero());
        for &(train, wm) in &trains {
            let wd = wm.data();
            for t in 0..train.t_steps {
                for i in 0..d_in {
                    if train.spike(t, r * d_in + i) {
                        for (a, &wij) in acc.iter_mut().zip(&wd[i * d_out..(i + 1) * d_out]) {
                            *a += wij;
                        }
                        accs += d_out as u64;
                    }
                }
            }
        }
        let (scale, offset) = (s.coarse.scale, s.coarse.offset);
        out.extend((0..d_out).map(|j| scale * acc[j] + offset * colsum[j] + b[j]));
    }
    let mut shape = s.coarse.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Ok((Tensor::new(&shape, out)?, accs))
}

/// `v · 2^e` by exponent manipulation.
#[inline]
pub fn pow2_shift<T: Scalar>(v: T, e: i32) -> T {
    v.ldexp(e)
}

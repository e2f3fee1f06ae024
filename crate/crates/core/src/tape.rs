//! Minimal reverse-mode tape over the primitives the forecaster uses.

use crate::activations::{pt_silu, pt_silu_grad, pt_softplus, pt_softplus_grad};
use crate::error::{Error, Result};
use crate::numerics::{
    depthwise_conv1d, depthwise_conv1d_backward, linear, linear_backward, rmsnorm, rmsnorm_backward,
};
use crate::quantize::{quantize_codes, quantize_values, ste_codes_backward, ste_values_backward, QuantizerParams, Rounding};
use crate::scalar::Scalar;
use crate::ssm::scan::{scan_backward, scan_forward, ScanForward, ScanInputs, ScanQuant};
use crate::ssm::{forecast_head, forecast_head_backward};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a quantization node emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantOutput {
    /// `α·code + β`.
    Values,
    /// The clipped code itself.
    Codes,
}

/// A quantizer whose step size and offset live on the tape.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars<T> {
    pub params: QuantizerParams<T>,
    pub alpha: Var,
    /// `None` for symmetric quantizers.
    pub beta: Option<Var>,
}

/// Variables feeding a selective scan node.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars<T> {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
    pub s: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub h: Option<QuantVars<T>>,
    pub y: Option<QuantVars<T>>,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, k: Var },
    RmsNorm { x: Var, g: Var, eps: T },
    Quant { x: Var, q: QuantVars<T>, params: QuantizerParams<T>, out: QuantOutput },
    PtSoftplus { x: Var },
    PtSilu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    SliceLast { x: Var, start: usize },
    Head { z: Var, w: Var, b: Var },
    Scan { v: ScanVars<T>, q: ScanQuant<T>, fwd: Box<ScanForward<T>> },
    Mse { pred: Var, target: Tensor<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
}

/// Ordered record of primitive applications with the inputs each one saved.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    rounding: Rounding,
    consumed: bool,
}

/// Gradients of the trainable leaves after one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a scalar leaf, zero when it did not influence the output.
    pub fn scalar(&self, v: Var) -> T {
        self.get(v).map_or(T::zero(), |g| g[0])
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new(Rounding::Nearest)
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new(rounding: Rounding) -> Self {
        Self {
            nodes: Vec::new(),
            rounding,
            consumed: false,
        }
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = trainable;
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = depthwise_conv1d(self.value(x), self.value(k))?;
        Ok(self.push(y, Op::Conv { x, k }))
    }

    pub fn rmsnorm(&mut self, x: Var, g: Var, eps: T) -> Result<Var> {
        let y = rmsnorm(self.value(x), self.value(g), eps)?;
        Ok(self.push(y, Op::RmsNorm { x, g, eps }))
    }

    /// Quantizer parameters with α and β read from their tape leaves.
    pub fn live_params(&self, q: &QuantVars<T>) -> QuantizerParams<T> {
        let mut p = q.params;
        p.alpha = self.value(q.alpha)[0];
        if let Some(b) = q.beta {
            p.beta = self.value(b)[0];
        }
        p
    }

    pub fn quantize(&mut self, x: Var, q: QuantVars<T>, out: QuantOutput) -> Result<Var> {
        let params = self.live_params(&q);
        params.validate()?;
        let xv = self.value(x);
        let y = match out {
            QuantOutput::Values => quantize_values(xv, &params, self.rounding),
            QuantOutput::Codes => quantize_codes(xv, &params, self.rounding),
        };
        Ok(self.push(y, Op::Quant { x, q, params, out }))
    }

    pub fn pt_softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(pt_softplus);
        self.push(y, Op::PtSoftplus { x })
    }

    pub fn pt_silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(pt_silu);
        self.push(y, Op::PtSilu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_last(start, len)?;
        Ok(self.push(y, Op::SliceLast { x, start }))
    }

    pub fn head(&mut self, z: Var, w: Var, b: Var) -> Result<Var> {
        let y = forecast_head(self.value(z), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Head { z, w, b }))
    }

    fn scan_inputs(&self, v: &ScanVars<T>) -> ScanInputs<'_, T> {
        ScanInputs {
            delta: self.value(v.delta),
            b: self.value(v.b),
            c: self.value(v.c),
            s: self.value(v.s),
            a_log: self.value(v.a_log),
            d_skip: self.value(v.d_skip),
        }
    }

    pub fn scan(&mut self, v: ScanVars<T>) -> Result<Var> {
        let q = ScanQuant {
            h: v.h.as_ref().map(|q| self.live_params(q)),
            y: v.y.as_ref().map(|q| self.live_params(q)),
        };
        let fwd = scan_forward(&self.scan_inputs(&v), &q, self.rounding)?;
        let y = fwd.y.clone();
        Ok(self.push(y, Op::Scan { v, q, fwd: Box::new(fwd) }))
    }

    /// Saved forward of a scan node, for calibration and inspection.
    pub fn scan_record(&self, v: Var) -> Option<&ScanForward<T>> {
        match &self.nodes[v.0].op {
            Op::Scan { fwd, .. } => Some(fwd),
            _ => None,
        }
    }

    /// Input of a quantization node.
    pub fn quant_input(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Quant { x, .. } => Some(self.value(*x)),
            _ => None,
        }
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.check_same(target, "mse")?;
        let n = T::from_usize(p.len().max(1)).unwrap();
        let loss = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.clone() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Reverse pass seeded with `seed = ∂L/∂out`. A tape can be replayed once.
    pub fn backward(&mut self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.value(out).check_same(seed, "backward")?;
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        grads[idx] = Some(g);
                    }
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = linear_backward(self.value(*x), self.value(*w), &g)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb)?;
                    }
                }
                Op::Conv { x, k } => {
                    let (gx, gk) = depthwise_conv1d_backward(self.value(*x), self.value(*k), &g)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *k, gk)?;
                }
                Op::RmsNorm { x, g: gain, eps } => {
                    let (gx, gg) = rmsnorm_backward(self.value(*x), self.value(*gain), *eps, &g)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *gain, gg)?;
                }
                Op::Quant { x, q, params, out } => {
                    let xv = self.value(*x);
                    let (gx, ga, gb) = match out {
                        QuantOutput::Values => ste_values_backward(&g, xv, params, self.rounding),
                        QuantOutput::Codes => ste_codes_backward(&g, xv, params),
                    };
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, q.alpha, Tensor::scalar(ga))?;
                    if let Some(b) = q.beta {
                        acc(&mut grads, b, Tensor::scalar(gb))?;
                    }
                }
                Op::PtSoftplus { x } => {
                    let d = self.value(*x).map(pt_softplus_grad);
                    acc(&mut grads, *x, d.mul(&g)?)?;
                }
                Op::PtSilu { x } => {
                    let d = self.value(*x).map(pt_silu_grad);
                    acc(&mut grads, *x, d.mul(&g)?)?;
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Mul { a, b } => {
                    acc(&mut grads, *a, g.mul(self.value(*b))?)?;
                    acc(&mut grads, *b, g.mul(self.value(*a))?)?;
                }
                Op::SliceLast { x, start } => {
                    let xv = self.value(*x);
                    let (d, w) = (xv.last_dim(), g.last_dim());
                    let mut gx = Tensor::zeros(xv.shape());
                    for (row, grow) in gx.data_mut().chunks_mut(d).zip(g.data().chunks(w)) {
                        row[*start..*start + w].copy_from_slice(grow);
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::Head { z, w, b } => {
                    let (gz, gw, gb) = forecast_head_backward(self.value(*z), self.value(*w), &g)?;
                    acc(&mut grads, *z, gz)?;
                    acc(&mut grads, *w, gw)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Scan { v, q, fwd } => {
                    let sg = scan_backward(&g, &self.scan_inputs(v), q, self.rounding, fwd)?;
                    acc(&mut grads, v.delta, sg.delta)?;
                    acc(&mut grads, v.b, sg.b)?;
                    acc(&mut grads, v.c, sg.c)?;
                    acc(&mut grads, v.s, sg.s)?;
                    acc(&mut grads, v.a_log, sg.a_log)?;
                    acc(&mut grads, v.d_skip, sg.d_skip)?;
                    for (qv, (ga, gb)) in [(&v.h, sg.h_q), (&v.y, sg.y_q)] {
                        if let Some(qv) = qv {
                            acc(&mut grads, qv.alpha, Tensor::scalar(ga))?;
                            if let Some(b) = qv.beta {
                                acc(&mut grads, b, Tensor::scalar(gb))?;
                            }
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let k = g[0] * T::lit(2.0) / T::from_usize(p.len().max(1)).unwrap();
                    let gp = p.zip_map(target, "mse", |a, b| k * (a - b))?;
                    acc(&mut grads, *pred, gp)?;
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.value(*x).shape(), g[0]);
                    acc(&mut grads, *x, gx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

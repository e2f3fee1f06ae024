use crate::error::Result;
use crate::quantize::{QuantMode, Rounding};
use crate::scalar::Scalar;
use crate::tape::{GradTape, QuantOutput, QuantVars, ScanVars, Var};
use crate::tensor::Tensor;

use super::model::{BlockParams, Model, ModelConfig, Site};

/// Where a site's pre-quantization values live on the tape.
#[derive(Clone, Copy, Debug)]
pub enum SiteInput {
    Direct(Var),
    /// State before `Q_h`, recorded inside the scan node.
    ScanState(Var),
    /// Output before `Q_y`, recorded inside the scan node.
    ScanOutput(Var),
}

/// A recorded quantized-ANN forward pass.
pub struct AnnGraph<T> {
    pub tape: GradTape<T>,
    /// Leaves for every trainable slot, in declaration order.
    pub params: Vec<Var>,
    pub input: Var,
    pub out: Var,
    /// Per block, indexed by [`Site::index`].
    pub sites: Vec<[SiteInput; 8]>,
}

impl<T: Scalar> AnnGraph<T> {
    /// Values a site quantizes (or would quantize when it has no quantizer).
    pub fn site_values(&self, block: usize, site: Site) -> Tensor<T> {
        match self.sites[block][site.index()] {
            SiteInput::Direct(v) => self.tape.value(v).clone(),
            SiteInput::ScanState(v) => self.tape.scan_record(v).unwrap().p_tensor(),
            SiteInput::ScanOutput(v) => self.tape.scan_record(v).unwrap().r_tensor(),
        }
    }
}

struct BlockVars<T> {
    w: [Var; 11],
    q: [Option<QuantVars<T>>; 8],
}

fn block_leaves<T: Scalar>(tape: &mut GradTape<T>, b: &BlockParams<T>, trainable: bool, params: &mut Vec<Var>) -> BlockVars<T> {
    let w = b.tensors().map(|t| tape.leaf(t.clone(), trainable));
    params.extend_from_slice(&w);
    let mut q = [None; 8];
    for site in Site::ALL {
        if let Some(p) = b.q(site) {
            let alpha = tape.leaf(Tensor::scalar(p.alpha), trainable);
            params.push(alpha);
            let beta = (p.mode == QuantMode::Asymmetric).then(|| {
                let v = tape.leaf(Tensor::scalar(p.beta), trainable);
                params.push(v);
                v
            });
            q[site.index()] = Some(QuantVars { params: *p, alpha, beta });
        }
    }
    BlockVars { w, q }
}

fn quant_or_pass<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    q: &Option<QuantVars<T>>,
    out: QuantOutput,
) -> Result<Var> {
    match q {
        Some(q) => tape.quantize(x, *q, out),
        None => Ok(x),
    }
}

/// `x + z` with `z` the gated spiking-mamba output on `rmsnorm(x)`.
fn block_graph<T: Scalar>(
    tape: &mut GradTape<T>,
    cfg: &ModelConfig,
    x: Var,
    v: &BlockVars<T>,
) -> Result<(Var, [SiteInput; 8])> {
    let (dh, n, r) = (cfg.d_hidden, cfg.d_state, cfg.r_delta());
    let [g_norm, w_in, conv_k, w_x, b_x, w_dt, b_dt, a_log, d_skip, w_o, b_o] = v.w;
    let q = |s: Site| &v.q[s.index()];

    let xn = tape.rmsnorm(x, g_norm, T::lit(cfg.eps))?;
    let proj = tape.linear(xn, w_in, None)?;
    let x_in = tape.slice_last(proj, 0, dh)?;
    let x_res = tape.slice_last(proj, dh, dh)?;

    let s_in = quant_or_pass(tape, x_in, q(Site::In), QuantOutput::Values)?;
    let c = tape.conv1d(s_in, conv_k)?;
    let s = quant_or_pass(tape, c, q(Site::Conv), QuantOutput::Values)?;

    let dbc = tape.linear(s, w_x, Some(b_x))?;
    let d_raw = tape.slice_last(dbc, 0, r)?;
    let bm = tape.slice_last(dbc, r, n)?;
    let cm = tape.slice_last(dbc, r + n, n)?;
    let d_s = quant_or_pass(tape, d_raw, q(Site::DtRaw), QuantOutput::Values)?;
    let d_pre = tape.linear(d_s, w_dt, Some(b_dt))?;
    let d_code = quant_or_pass(tape, d_pre, q(Site::DtCode), QuantOutput::Codes)?;
    let d_soft = tape.pt_softplus(d_code);
    let delta = quant_or_pass(tape, d_soft, q(Site::Delta), QuantOutput::Values)?;

    let y = tape.scan(ScanVars {
        delta,
        b: bm,
        c: cm,
        s,
        a_log,
        d_skip,
        h: *q(Site::H),
        y: *q(Site::Y),
    })?;

    let r_q = quant_or_pass(tape, x_res, q(Site::Res), QuantOutput::Values)?;
    let gate = tape.pt_silu(r_q);
    let gated = tape.mul(y, gate)?;
    let z = tape.linear(gated, w_o, Some(b_o))?;
    let out = tape.add(x, z)?;

    let sites = [
        SiteInput::Direct(x_in),
        SiteInput::Direct(c),
        SiteInput::Direct(d_raw),
        SiteInput::Direct(d_pre),
        SiteInput::Direct(d_soft),
        SiteInput::ScanState(y),
        SiteInput::ScanOutput(y),
        SiteInput::Direct(x_res),
    ];
    Ok((out, sites))
}

/// Records the quantized-ANN forward of `model` on `x: [B, history, n_vars]`.
///
/// With `trainable` set every parameter leaf (and the input) receives a
/// gradient on backward.
pub fn build_graph<T: Scalar>(model: &Model<T>, x: &Tensor<T>, rounding: Rounding, trainable: bool) -> Result<AnnGraph<T>> {
    let mut tape = GradTape::new(rounding);
    let mut params = Vec::new();
    let vars: Vec<BlockVars<T>> = model
        .blocks
        .iter()
        .map(|b| block_leaves(&mut tape, b, trainable, &mut params))
        .collect();
    let w_head = tape.leaf(model.w_head.clone(), trainable);
    let b_head = tape.leaf(model.b_head.clone(), trainable);
    params.push(w_head);
    params.push(b_head);

    let input = tape.leaf(x.clone(), trainable);
    let mut h = input;
    let mut sites = Vec::with_capacity(vars.len());
    for v in &vars {
        let (out, s) = block_graph(&mut tape, &model.config, h, v)?;
        h = out;
        sites.push(s);
    }
    let out = tape.head(h, w_head, b_head)?;
    Ok(AnnGraph {
        tape,
        params,
        input,
        out,
        sites,
    })
}

/// Quantized-ANN forward of a single block on `x: [B, L, d_v]`.
pub fn block_forward_ann<T: Scalar>(cfg: &ModelConfig, block: &BlockParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = GradTape::new(Rounding::Nearest);
    let mut params = Vec::new();
    let v = block_leaves(&mut tape, block, false, &mut params);
    let xv = tape.constant(x.clone());
    let (out, _) = block_graph(&mut tape, cfg, xv, &v)?;
    Ok(tape.value(out).clone())
}

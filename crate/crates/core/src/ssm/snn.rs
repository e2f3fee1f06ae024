//! Spike-driven forward pass of a converted model, with operation counting.

use std::collections::BTreeMap;

use crate::activations::{pt_silu, pt_softplus_right, PtConstants};
use crate::energy::{OpCounters, OpKind};
use crate::error::{Error, Result};
use crate::numerics::{linear, rmsnorm};
use crate::quantize::QuantizerParams;
use crate::scalar::Scalar;
use crate::spike::{pow2_shift, spiking_matvec_site, SiteSpikes, SpikeSiteConfig};
use crate::tensor::Tensor;

use super::forecast_head;
use super::model::{BlockParams, Model, ModelConfig, Site};
use super::scan::{exponent, transition};

/// Spikes emitted at every spiking site during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct SnnTrace<T> {
    pub blocks: Vec<BTreeMap<Site, SiteSpikes<T>>>,
}

impl<T: Scalar> SnnTrace<T> {
    /// Spike rate per `block<i>.<site>`.
    pub fn site_rates(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (bi, sites) in self.blocks.iter().enumerate() {
            for (site, s) in sites {
                out.insert(format!("block{bi}.{}", site.name()), s.rate());
            }
        }
        out
    }

    pub fn total_spikes(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.values()).map(|s| s.total_spikes()).sum()
    }
}

fn site<T: Scalar>(b: &BlockParams<T>, s: Site) -> Result<(QuantizerParams<T>, SpikeSiteConfig<T>)> {
    match (b.q(s), b.spike(s)) {
        (Some(q), Some(sp)) => Ok((*q, *sp)),
        _ => Err(Error::UnquantizedSite(s.name().to_string())),
    }
}

fn encode<T: Scalar>(
    values: &Tensor<T>,
    q: &QuantizerParams<T>,
    sp: &SpikeSiteConfig<T>,
    counters: &mut OpCounters,
    layer: &str,
) -> SiteSpikes<T> {
    let codes: Vec<i64> = values.data().iter().map(|&v| q.code(v)).collect();
    encode_codes(values.shape(), &codes, sp, counters, layer)
}

fn encode_codes<T: Scalar>(
    shape: &[usize],
    codes: &[i64],
    sp: &SpikeSiteConfig<T>,
    counters: &mut OpCounters,
    layer: &str,
) -> SiteSpikes<T> {
    let s = sp.encode_codes(shape, codes);
    let trains = if s.fine.is_some() { 2 } else { 1 };
    counters.add(layer, OpKind::Cmp, (codes.len() * sp.t_steps * trains) as u64);
    s
}

/// One block on spike trains: `[B, L, d_v] → [B, L, d_v]`.
pub fn block_forward_snn<T: Scalar>(
    cfg: &ModelConfig,
    block: &BlockParams<T>,
    index: usize,
    x: &Tensor<T>,
    counters: &mut OpCounters,
) -> Result<(Tensor<T>, BTreeMap<Site, SiteSpikes<T>>)> {
    let [bsz, len, dv] = *x.shape() else {
        return Err(Error::Shape {
            op: "block_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    };
    let (dh, n, r, kw) = (cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
    let l = |s: &str| format!("block{index}.{s}");
    let rows = (bsz * len) as u64;
    let mut trace = BTreeMap::new();

    // Dense front end: normalization and input projection.
    let xn = rmsnorm(x, &block.g_norm, T::lit(cfg.eps))?;
    counters.add(&l("norm"), OpKind::Mac, rows * dv as u64 * 2);
    let proj = linear(&xn, &block.w_in, None)?;
    counters.add(&l("in_proj"), OpKind::Mac, rows * (dv * 2 * dh) as u64);
    let x_in = proj.slice_last(0, dh)?;
    let x_res = proj.slice_last(dh, dh)?;

    // Depthwise causal convolution driven by input spikes.
    let (q_in, sp_in) = site(block, Site::In)?;
    let s_in = encode(&x_in, &q_in, &sp_in, counters, &l("enc.in"));
    let kd = block.conv_k.data();
    let gain_in = T::from_usize(s_in.gain).unwrap();
    let mut conv = vec![T::zero(); bsz * len * dh];
    let mut conv_acc = 0u64;
    for b in 0..bsz {
        for t in 0..len {
            for d in 0..dh {
                let mut acc = T::zero();
                let mut ksum = T::zero();
                for j in 0..kw {
                    let Some(tau) = (t + j + 1).checked_sub(kw) else { continue };
                    let w = kd[d * kw + j];
                    let (a, k) = s_in.accumulate_neuron((b * len + tau) * dh + d, w, gain_in * w);
                    acc += a;
                    ksum += w;
                    conv_acc += k as u64;
                }
                conv[(b * len + t) * dh + d] = s_in.coarse.scale * acc + s_in.coarse.offset * ksum;
            }
        }
    }
    counters.add(&l("conv"), OpKind::Acc, conv_acc);
    counters.add(&l("conv.bias"), OpKind::Acc, rows * dh as u64);
    let conv = Tensor::new(&[bsz, len, dh], conv)?;
    let (q_conv, sp_conv) = site(block, Site::Conv)?;
    let s = encode(&conv, &q_conv, &sp_conv, counters, &l("enc.conv"));

    // Split projection and the Δ path.
    let (dbc, acc) = spiking_matvec_site(&block.w_x, None, &block.b_x, &s)?;
    counters.add(&l("x_proj"), OpKind::Acc, acc);
    counters.add(&l("x_proj.bias"), OpKind::Acc, rows * (r + 2 * n) as u64);
    let d_raw = dbc.slice_last(0, r)?;
    let bm = dbc.slice_last(r, n)?;
    let cm = dbc.slice_last(r + n, n)?;
    let (q_dr, sp_dr) = site(block, Site::DtRaw)?;
    let s_dt = encode(&d_raw, &q_dr, &sp_dr, counters, &l("enc.dt_raw"));
    let (d_pre, acc) = spiking_matvec_site(&block.w_dt, None, &block.b_dt, &s_dt)?;
    counters.add(&l("dt_proj"), OpKind::Acc, acc);
    counters.add(&l("dt_proj.bias"), OpKind::Acc, rows * dh as u64);
    let q_code = *block
        .q(Site::DtCode)
        .ok_or_else(|| Error::UnquantizedSite(Site::DtCode.name().into()))?;
    counters.add(&l("enc.dt_code"), OpKind::Cmp, rows * dh as u64 * (q_code.qp() - q_code.qn()) as u64);
    let k = PtConstants::<T>::new();
    let mut soft = Vec::with_capacity(d_pre.len());
    for &v in d_pre.data() {
        let code = q_code.code(v);
        let c = T::from_i64(code).unwrap();
        if c < k.x_c {
            soft.push(pow2_shift(T::one(), code as i32));
            counters.add(&l("dt_act"), OpKind::Shift, 1);
        } else {
            soft.push(pt_softplus_right(c, &k));
            counters.add(&l("dt_act"), OpKind::Acc, 1);
        }
    }
    let soft = Tensor::new(d_pre.shape(), soft)?;
    let (q_delta, sp_delta) = site(block, Site::Delta)?;
    let s_delta = encode(&soft, &q_delta, &sp_delta, counters, &l("enc.delta"));

    // Selective scan on spikes: shifts for the decay, accumulations elsewhere.
    let (q_h, sp_h) = site(block, Site::H)?;
    let (q_y, sp_y) = site(block, Site::Y)?;
    let a = transition(&block.a_log);
    let (bd, cd, dk) = (bm.data(), cm.data(), block.d_skip.data());
    let gain_s = T::from_usize(s.gain).unwrap();
    let mut h_codes = vec![0i64; bsz * len * dh * n];
    let mut y_codes = vec![0i64; bsz * len * dh];
    let (mut shifts, mut input_acc, mut read_acc, mut macs) = (0u64, 0u64, 0u64, 0u64);
    let mut prev_val = vec![T::zero(); n];
    let mut prev_spk = vec![0usize; n];
    let mut step_codes = vec![0i64; n];
    let mut scratch = OpCounters::default();
    for b in 0..bsz {
        for d in 0..dh {
            prev_val.iter_mut().for_each(|v| *v = T::zero());
            prev_spk.iter_mut().for_each(|v| *v = 0);
            for t in 0..len {
                let ni = (b * len + t) * dh + d;
                let (c0, f0) = (s_delta.coarse.count(ni), s_delta.fine.as_ref().map_or(0, |f| f.count(ni)));
                let dt = s_delta.decode_counts(c0, f0);
                for i in 0..n {
                    let e = exponent(dt * a[d * n + i]);
                    let decay = pow2_shift(prev_val[i], e);
                    shifts += prev_spk[i] as u64;
                    let w = dt * bd[(b * len + t) * n + i];
                    macs += 1;
                    let (term, k) = s.times(ni, w, gain_s * w);
                    input_acc += k as u64;
                    step_codes[i] = q_h.code(decay + term);
                }
                let hs = encode_codes(&[n], &step_codes, &sp_h, &mut scratch, "");
                let gain_h = T::from_usize(hs.gain).unwrap();
                let hcounts = hs.counts();
                let mut acc = T::zero();
                for i in 0..n {
                    let cv = cd[(b * len + t) * n + i];
                    let (v, k) = hs.times(i, cv, gain_h * cv);
                    acc += v;
                    read_acc += k as u64;
                    let (hc, hf) = hcounts[i];
                    prev_val[i] = hs.decode_counts(hc, hf);
                    prev_spk[i] = hc + hf;
                    h_codes[ni * n + i] = step_codes[i];
                }
                let (v, k) = s.times(ni, dk[d], gain_s * dk[d]);
                read_acc += k as u64;
                y_codes[ni] = q_y.code(acc + v);
            }
        }
    }
    counters.add(&l("enc.h"), OpKind::Cmp, scratch.total.cmp);
    counters.add(&l("scan.decay"), OpKind::Shift, shifts);
    counters.add(&l("scan.input"), OpKind::Mac, macs);
    counters.add(&l("scan.input"), OpKind::Acc, input_acc);
    counters.add(&l("scan.readout"), OpKind::Acc, read_acc);
    let s_h = sp_h.encode_codes(&[bsz, len, dh, n], &h_codes);
    let s_y = encode_codes(&[bsz, len, dh], &y_codes, &sp_y, counters, &l("enc.y"));

    // Gate and output projection.
    let (q_res, sp_res) = site(block, Site::Res)?;
    let s_res = encode(&x_res, &q_res, &sp_res, counters, &l("enc.res"));
    let res_vals = s_res.decode();
    let gain_y = T::from_usize(s_y.gain).unwrap();
    let mut gated = Vec::with_capacity(res_vals.len());
    let mut gate_acc = 0u64;
    for (i, &rv) in res_vals.data().iter().enumerate() {
        let g = pt_silu(rv);
        let (v, k) = s_y.times(i, g, gain_y * g);
        gate_acc += k as u64;
        gated.push(v);
    }
    counters.add(&l("gate_act"), OpKind::Mac, rows * dh as u64);
    counters.add(&l("gate"), OpKind::Acc, gate_acc);
    let gated = Tensor::new(&[bsz, len, dh], gated)?;
    let z = linear(&gated, &block.w_o, Some(&block.b_o))?;
    counters.add(&l("out_proj"), OpKind::Mac, rows * (dh * dv) as u64);
    counters.add(&l("out_proj.bias"), OpKind::Acc, rows * dv as u64);
    let out = x.add(&z)?;
    counters.add(&l("residual"), OpKind::Acc, rows * dv as u64);

    trace.insert(Site::In, s_in);
    trace.insert(Site::Conv, s);
    trace.insert(Site::DtRaw, s_dt);
    trace.insert(Site::Delta, s_delta);
    trace.insert(Site::H, s_h);
    trace.insert(Site::Y, s_y);
    trace.insert(Site::Res, s_res);
    Ok((out, trace))
}

pub(crate) fn model_forward_snn<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    counters: &mut OpCounters,
) -> Result<(Tensor<T>, SnnTrace<T>)> {
    let mut h = x.clone();
    let mut trace = SnnTrace::default();
    for (i, b) in model.blocks.iter().enumerate() {
        let (out, t) = block_forward_snn(&model.config, b, i, &h, counters)?;
        h = out;
        trace.blocks.push(t);
    }
    let out = forecast_head(&h, &model.w_head, &model.b_head)?;
    let cfg = &model.config;
    let bsz = x.shape()[0] as u64;
    counters.add("head", OpKind::Mac, bsz * (cfg.n_vars * cfg.history * cfg.horizon) as u64);
    counters.add("head.bias", OpKind::Acc, bsz * (cfg.n_vars * cfg.horizon) as u64);
    Ok((out, trace))
}

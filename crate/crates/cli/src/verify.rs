use std::path::Path;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikyspace::activations::{
    pt_silu_grad_left, pt_silu_grad_right, pt_silu_left, pt_silu_right, pt_softplus_grad_left, pt_softplus_left,
    pt_softplus_right, verify_deviation_bounds, PtConstants,
};
use spikyspace::checkpoint;
use spikyspace::data::{all_windows, load_csv};
use spikyspace::energy::OpCounters;
use spikyspace::quantize::QuantizerParams;
use spikyspace::spike::{decode, encode_quantized, threshold_scale, window_for_bits, SpikeSiteConfig};
use spikyspace::train::{apply_threshold_scaling, convert};
use spikyspace::{Mode, Model, Tensor};

use crate::commands::load_model;
use crate::{Status, VerifyArgs};

const SOFTPLUS_BOUNDS: (f64, f64) = (0.914, 0.371);
const SILU_BOUNDS: (f64, f64) = (0.316, 0.263);
const CONTINUITY_TOL: f64 = 1e-12;
const EQUIVALENCE_TOL: f64 = 1e-9;
const CODEC_TOL: f64 = 1e-12;

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

fn check(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

fn activation_checks(step: f64, out: &mut Vec<Check>) -> Result<()> {
    let r = verify_deviation_bounds(-10.0, 10.0, step)?;
    for (name, pair, (bv, bd)) in [("pt_softplus", r.softplus, SOFTPLUS_BOUNDS), ("pt_silu", r.silu, SILU_BOUNDS)] {
        out.push(check(
            format!("{name} deviation"),
            pair.value.max <= bv && pair.derivative.max <= bd,
            format!(
                "value {:.6} (<= {bv}), derivative {:.6} (<= {bd}) over {} points",
                pair.value.max, pair.derivative.max, r.points
            ),
        ));
    }
    let k = PtConstants::<f64>::new();
    let gaps = [
        (pt_softplus_left(k.x_c) - pt_softplus_right(k.x_c, &k)).abs(),
        (pt_softplus_grad_left(k.x_c) - 1.0).abs(),
        (pt_silu_left(k.x_bar_c) - pt_silu_right(k.x_bar_c, &k)).abs(),
        (pt_silu_grad_left(k.x_bar_c) - pt_silu_grad_right(k.x_bar_c)).abs(),
    ];
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    out.push(check(
        "branch continuity",
        worst <= CONTINUITY_TOL,
        format!("largest value/derivative jump {worst:.1e} (<= {CONTINUITY_TOL:e})"),
    ));
    Ok(())
}

fn codec_checks(out: &mut Vec<Check>) -> Result<()> {
    for bits in 1..=4 {
        let q = QuantizerParams::<f64>::asymmetric(0.37, -0.2, bits)?;
        let codes: Vec<i64> = (q.qn()..=q.qp()).collect();
        let shape = [codes.len()];
        let x_q = Tensor::new(&shape, codes.iter().map(|&c| q.dequantize(c)).collect())?;
        let plain = decode(&encode_quantized(&x_q, &q)?).max_abs_diff(&x_q)?;
        let t = window_for_bits(bits);
        let scaled_cfg = threshold_scale(&SpikeSiteConfig::from_quantizer(&q)?, t)?;
        let scaled = scaled_cfg.encode_codes(&shape, &codes).decode().max_abs_diff(&x_q)?;
        let worst = plain.max(scaled);
        out.push(check(
            format!("spike codec, {bits} bit"),
            worst <= CODEC_TOL,
            format!("T = {t}, {} codes, plain {plain:.1e}, threshold-scaled {scaled:.1e}", codes.len()),
        ));
    }
    Ok(())
}

fn inputs(model: &Model<f64>, a: &VerifyArgs) -> Result<(Tensor<f64>, String)> {
    let cfg = &model.config;
    if let Some(path) = &a.data {
        let ds = load_csv(path, !a.no_header).with_context(|| format!("loading {}", path.display()))?;
        let norm = model
            .norm
            .as_ref()
            .context("checkpoint carries no normalization statistics")?;
        let ws = all_windows::<f64>(&ds, cfg.history, cfg.horizon, norm)?;
        let k = ws.len().min(a.samples.max(1));
        let idx: Vec<usize> = (0..k).collect();
        return Ok((ws.gather(&idx).0, format!("{k} data windows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let shape = [a.samples.max(1), cfg.history, cfg.n_vars];
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    Ok((Tensor::new(&shape, data)?, format!("{} random windows", shape[0])))
}

fn model_checks(path: &Path, a: &VerifyArgs, out: &mut Vec<Check>) -> Result<()> {
    let model = load_model(path)?;
    let (x, source) = inputs(&model, a)?;
    let snn = match model.mode {
        Mode::Ann => convert(&model)?,
        Mode::Snn => model.clone(),
    };
    let ann_out = model.forward_ann(&x)?;
    let mut nets = vec![("converted", snn.clone())];
    if model.mode == Mode::Ann {
        nets.push(("threshold-scaled", apply_threshold_scaling(&snn)?));
    }
    for (label, net) in nets {
        let mut c = OpCounters::default();
        let (y, trace) = net.forward_snn(&x, &mut c)?;
        let d = ann_out.max_abs_diff(&y)?;
        out.push(check(
            format!("ANN/SNN equivalence, {label}"),
            d <= EQUIVALENCE_TOL,
            format!("max |diff| {d:.2e} (<= {EQUIVALENCE_TOL:e}) on {source}, {} spikes", trace.total_spikes()),
        ));
    }
    let bytes = checkpoint::to_bytes(&model)?;
    let back: Model<f64> = checkpoint::from_bytes(&bytes)?;
    let same = checkpoint::to_bytes(&back)? == bytes && back == model.snapped_to_f32();
    out.push(check(
        "checkpoint round trip",
        same,
        format!("{} bytes, {} mode", bytes.len(), model.mode.name()),
    ));
    Ok(())
}

pub fn run(a: &VerifyArgs) -> Result<Status> {
    let mut checks = Vec::new();
    activation_checks(a.grid_step, &mut checks)?;
    codec_checks(&mut checks)?;
    if let Some(p) = &a.model {
        model_checks(p, a, &mut checks)?;
    } else if a.data.is_some() {
        anyhow::bail!("--data needs --model");
    }
    let failed = checks.iter().filter(|c| !c.ok).count();
    for c in &checks {
        println!("{}  {}: {}", if c.ok { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { Status::Ok } else { Status::VerifyFailed })
}

#![allow(dead_code)]

use std::collections::BTreeMap;

use num::{BigRational, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spikyspace::quantize::{QuantMode, QuantizerParams};
use spikyspace::spike::SiteSpikes;
use spikyspace::ssm::{Model, ModelConfig, Site, DELTA_BETA_FLOOR};
use spikyspace::train::calibrate;
use spikyspace::Tensor;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Tiny configuration within `d_v ≤ 4`, `d_hidden ≤ 16`, `n ≤ 4`, `L ≤ 16`, 2 bits.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig::new(rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=4));
    cfg.d_hidden = rng.random_range(1..=16);
    cfg.d_state = rng.random_range(1..=4);
    cfg.conv_k = rng.random_range(1..=4);
    cfg.n_blocks = rng.random_range(1..=2);
    cfg.bits = 2;
    cfg
}

/// Randomly initialized, calibrated model with every tensor and quantizer
/// offset perturbed away from its default.
pub fn random_model(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Model<f64> {
    let mut m = Model::<f64>::new(cfg.clone(), rng).unwrap();
    for t in m.weight_tensors_mut() {
        let noise = rand_tensor(rng, t.shape(), 0.3);
        t.add_assign(&noise).unwrap();
    }
    let x = rand_tensor(rng, &[4, cfg.history, cfg.n_vars], 2.0);
    calibrate(&mut m, &x).unwrap();
    for b in &mut m.blocks {
        for site in Site::ALL {
            let q: &mut QuantizerParams<f64> = b.quant[site.index()].as_mut().unwrap();
            q.alpha *= rng.random_range(0.5..2.0);
            if q.mode == QuantMode::Asymmetric {
                q.beta = if site == Site::Delta {
                    DELTA_BETA_FLOOR + rng.random_range(0.0..0.5)
                } else {
                    rng.random_range(-0.5..0.5)
                };
            }
        }
    }
    m
}

/// Central differences of a scalar function with respect to every entry of `x`.
pub fn finite_diff(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest entrywise relative error, with `floor` guarding near-zero entries.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Model whose scan state sits at the top of its grid at every step.
pub fn saturated_scan_model() -> (Model<f64>, Tensor<f64>) {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
    let mut cfg = ModelConfig::new(2, 8, 2);
    cfg.d_hidden = 4;
    cfg.d_state = 3;
    let mut m = random_model(&mut rng, cfg);
    let b = &mut m.blocks[0];
    let (r, n) = (m.config.r_delta(), m.config.d_state);
    b.w_x = Tensor::zeros(b.w_x.shape());
    for j in 0..b.b_x.len() {
        b.b_x[j] = if j >= r && j < r + n { 1.0 } else { 0.5 };
    }
    b.quant[Site::Conv.index()] = Some(QuantizerParams::asymmetric(0.2, 0.1, 2).unwrap());
    b.quant[Site::H.index()] = Some(QuantizerParams::asymmetric(0.01, -10.0, 2).unwrap());
    let x = rand_tensor(&mut rng, &[2, 8, 2], 1.0);
    (m, x)
}

fn spikes(s: &SiteSpikes<f64>) -> Vec<u64> {
    s.counts().into_iter().map(|(c, f)| (c + f) as u64).collect()
}

fn total(s: &SiteSpikes<f64>) -> u64 {
    s.total_spikes() as u64
}

/// Spike-driven accumulations per layer from spike counts and fan-outs alone.
pub fn analytic_acc(cfg: &ModelConfig, bsz: usize, trace: &[BTreeMap<Site, SiteSpikes<f64>>]) -> BTreeMap<String, u64> {
    let (len, dh, n, r, kw) = (cfg.history, cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
    let mut out = BTreeMap::new();
    for (bi, sites) in trace.iter().enumerate() {
        let name = |s: &str| format!("block{bi}.{s}");
        let s_in = spikes(&sites[&Site::In]);
        let mut conv = 0;
        for b in 0..bsz {
            for tau in 0..len {
                for d in 0..dh {
                    conv += s_in[(b * len + tau) * dh + d] * kw.min(len - tau) as u64;
                }
            }
        }
        let s_conv = total(&sites[&Site::Conv]);
        let s_h = spikes(&sites[&Site::H]);
        let mut decay = 0;
        for b in 0..bsz {
            for t in 0..len.saturating_sub(1) {
                for k in 0..dh * n {
                    decay += s_h[(b * len + t) * dh * n + k];
                }
            }
        }
        out.insert(name("conv"), conv);
        out.insert(name("x_proj"), s_conv * (r + 2 * n) as u64);
        out.insert(name("dt_proj"), total(&sites[&Site::DtRaw]) * dh as u64);
        out.insert(name("scan.input"), s_conv * n as u64);
        out.insert(name("scan.readout"), total(&sites[&Site::H]) + s_conv);
        out.insert(name("gate"), total(&sites[&Site::Y]));
        out.insert(name("scan.decay.shift"), decay);
    }
    out
}

/// Average integrate-and-fire, one line per step, in exact rational arithmetic.
pub fn literal_average_if(drive: &BigRational, t_steps: usize, theta: &BigRational) -> Vec<u8> {
    let a = drive / BigRational::from_integer(t_steps.into());
    let mut v = BigRational::zero();
    let mut out = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        v += &a;
        if v >= *theta {
            out.push(1);
            v -= theta;
        } else {
            out.push(0);
        }
    }
    out
}

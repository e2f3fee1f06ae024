mod common;

use common::{finite_diff, max_rel_err, rand_tensor, random_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikyspace::activations::{pt_silu, pt_softplus};
use spikyspace::energy::OpCounters;
use spikyspace::quantize::{QuantizerParams, Rounding};
use spikyspace::ssm::{block_forward_ann, block_forward_snn, build_graph, BlockParams, ModelConfig, Site, SiteInput};
use spikyspace::train::{calibrate, convert};
use spikyspace::{Model, Tensor};

fn q(v: f64, p: &QuantizerParams<f64>) -> f64 {
    let c = ((v - p.beta) / p.alpha).round().clamp(p.qn() as f64, p.qp() as f64);
    p.alpha * c + p.beta
}

/// Direct loop-by-loop evaluation of one quantized block on `x: [L, d_v]`.
fn oracle_block(cfg: &ModelConfig, p: &BlockParams<f64>, x: &[f64]) -> Vec<f64> {
    let (dv, dh, n, r, kw) = (cfg.n_vars, cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
    let len = x.len() / dv;
    let qs = |s: Site| p.quant[s.index()].unwrap();
    let m = r + 2 * n;
    let (g, w_in, k, w_x, b_x) = (p.g_norm.data(), p.w_in.data(), p.conv_k.data(), p.w_x.data(), p.b_x.data());
    let (w_dt, b_dt, a_log, dsk, w_o, b_o) = (p.w_dt.data(), p.b_dt.data(), p.a_log.data(), p.d_skip.data(), p.w_o.data(), p.b_o.data());

    let mut x_in = vec![0.0; len * dh];
    let mut x_res = vec![0.0; len * dh];
    for t in 0..len {
        let row = &x[t * dv..(t + 1) * dv];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / dv as f64;
        let inv = 1.0 / (ms + cfg.eps).sqrt();
        for j in 0..2 * dh {
            let mut acc = 0.0;
            for c in 0..dv {
                acc += row[c] * inv * g[c] * w_in[c * 2 * dh + j];
            }
            if j < dh {
                x_in[t * dh + j] = acc;
            } else {
                x_res[t * dh + j - dh] = acc;
            }
        }
    }
    let s_in: Vec<f64> = x_in.iter().map(|&v| q(v, &qs(Site::In))).collect();
    let mut s = vec![0.0; len * dh];
    for t in 0..len {
        for d in 0..dh {
            let mut acc = 0.0;
            for j in 0..kw {
                if t + j + 1 >= kw {
                    acc += k[d * kw + j] * s_in[(t + j + 1 - kw) * dh + d];
                }
            }
            s[t * dh + d] = q(acc, &qs(Site::Conv));
        }
    }
    let mut out = x.to_vec();
    let mut h = vec![0.0; dh * n];
    let q_dt = qs(Site::DtCode);
    for t in 0..len {
        let mut dbc = vec![0.0; m];
        for (j, v) in dbc.iter_mut().enumerate() {
            *v = b_x[j] + (0..dh).map(|d| s[t * dh + d] * w_x[d * m + j]).sum::<f64>();
        }
        let ds: Vec<f64> = dbc[..r].iter().map(|&v| q(v, &qs(Site::DtRaw))).collect();
        let (bv, cv) = (&dbc[r..r + n], &dbc[r + n..]);
        let mut gated = vec![0.0; dh];
        for d in 0..dh {
            let pre = b_dt[d] + (0..r).map(|i| ds[i] * w_dt[i * dh + d]).sum::<f64>();
            let code = (pre / q_dt.alpha).round().clamp(q_dt.qn() as f64, q_dt.qp() as f64);
            let delta = q(pt_softplus(code), &qs(Site::Delta));
            let sd = s[t * dh + d];
            let mut y = dsk[d] * sd;
            for i in 0..n {
                let a = -a_log[d * n + i].exp();
                let e = (delta * a).round_ties_even().clamp(-32.0, 0.0);
                let pv = 2f64.powi(e as i32) * h[d * n + i] + delta * bv[i] * sd;
                h[d * n + i] = q(pv, &qs(Site::H));
                y += cv[i] * h[d * n + i];
            }
            let gate = pt_silu(q(x_res[t * dh + d], &qs(Site::Res)));
            gated[d] = q(y, &qs(Site::Y)) * gate;
        }
        for c in 0..dv {
            out[t * dv + c] += b_o[c] + (0..dh).map(|d| gated[d] * w_o[d * dv + c]).sum::<f64>();
        }
    }
    out
}

fn small_cfg(dv: usize, len: usize, dh: usize, n: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(dv, len, 1);
    cfg.d_hidden = dh;
    cfg.d_state = n;
    cfg
}

#[test]
fn zero_block_is_pure_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = small_cfg(3, 6, 8, 4);
    let x = rand_tensor(&mut rng, &[2, 6, 3], 1.5);
    let zero = BlockParams::<f64>::zeros(&cfg);
    assert_eq!(block_forward_ann(&cfg, &zero, &x).unwrap(), x);

    let mut m = random_model(&mut rng, cfg.clone());
    m.blocks[0].w_o = Tensor::zeros(&[8, 3]);
    m.blocks[0].b_o = Tensor::zeros(&[3]);
    assert_eq!(block_forward_ann(&cfg, &m.blocks[0], &x).unwrap(), x);
    let s = convert(&m).unwrap();
    let (y, _) = block_forward_snn(&cfg, &s.blocks[0], 0, &x, &mut OpCounters::default()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn matches_scalar_oracle_in_both_modes() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = small_cfg(2, 5, 4, 2);
        let m = random_model(&mut rng, cfg.clone());
        let x = rand_tensor(&mut rng, &[1, 5, 2], 2.0);
        let want = oracle_block(&cfg, &m.blocks[0], x.data());
        let ann = block_forward_ann(&cfg, &m.blocks[0], &x).unwrap();
        let s = convert(&m).unwrap();
        let (snn, _) = block_forward_snn(&cfg, &s.blocks[0], 0, &x, &mut OpCounters::default()).unwrap();
        let want = Tensor::new(&[1, 5, 2], want).unwrap();
        assert!(ann.max_abs_diff(&want).unwrap() <= 1e-9, "seed {seed}");
        assert!(snn.max_abs_diff(&want).unwrap() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn closed_gate_leaves_output_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = small_cfg(2, 7, 8, 4);
    let mut m = random_model(&mut rng, cfg.clone());
    let b = &mut m.blocks[0];
    for i in 0..2 {
        for j in 8..16 {
            b.w_in[i * 16 + j] = 0.0;
        }
    }
    b.quant[Site::Res.index()] = Some(QuantizerParams::asymmetric(0.1, -30.0, 2).unwrap());
    let x = rand_tensor(&mut rng, &[3, 7, 2], 1.0);
    let s = convert(&m).unwrap();
    let (snn, _) = block_forward_snn(&cfg, &s.blocks[0], 0, &x, &mut OpCounters::default()).unwrap();
    for y in [block_forward_ann(&cfg, &m.blocks[0], &x).unwrap(), snn] {
        for (i, (&o, &xi)) in y.data().iter().zip(x.data()).enumerate() {
            assert!((o - xi - m.blocks[0].b_o[i % 2]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_scan_output_zeroes_the_gate_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_cfg(2, 5, 4, 2);
    let mut m = random_model(&mut rng, cfg.clone());
    m.blocks[0].quant[Site::Y.index()] = Some(QuantizerParams::asymmetric(0.5, 0.0, 2).unwrap());
    m.blocks[0].d_skip = Tensor::zeros(&[4]);
    m.blocks[0].w_x = Tensor::zeros(m.blocks[0].w_x.shape());
    m.blocks[0].b_x = Tensor::zeros(m.blocks[0].b_x.shape());
    let x = rand_tensor(&mut rng, &[2, 5, 2], 1.0);
    let y = block_forward_ann(&cfg, &m.blocks[0], &x).unwrap();
    for (i, (&o, &xi)) in y.data().iter().zip(x.data()).enumerate() {
        assert_eq!(o, xi + m.blocks[0].b_o[i % 2]);
    }
}

#[test]
fn state_stays_bounded_over_long_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let len = 10_000;
    let mut cfg = small_cfg(1, len, 4, 4);
    cfg.horizon = 2;
    let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let x = Tensor::full(&[1, len, 1], 0.8);
    calibrate(&mut m, &x).unwrap();
    let g = build_graph(&m, &x, Rounding::Nearest, false).unwrap();
    assert!(g.tape.value(g.out).all_finite());
    let SiteInput::ScanState(v) = g.sites[0][Site::H.index()] else { panic!() };
    let rec = g.tape.scan_record(v).unwrap();
    let (lo, hi) = m.blocks[0].q(Site::H).unwrap().range();
    assert!(rec.h_tensor().data().iter().all(|&h| h >= lo && h <= hi));
    assert!(rec.abar.iter().all(|&a| a > 0.0 && a <= 1.0));
    let delta = g.site_values(0, Site::Delta);
    assert!(delta.data().iter().all(|&d| d > 0.0));
    assert!(m.blocks[0].q(Site::Delta).unwrap().beta > 0.0);
}

/// `Σ probe ⊙ forward` under relaxed rounding, for a model whose trainable
/// slots are overwritten with `flat`.
fn probe_loss(m: &Model<f64>, flat: &[f64], x: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    let mut m = m.clone();
    let mut k = 0;
    m.visit_params_mut(|s| {
        s.copy_from_slice(&flat[k..k + s.len()]);
        k += s.len();
    });
    let g = build_graph(&m, x, Rounding::Relaxed, false).unwrap();
    g.tape.value(g.out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn full_block_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut cfg = small_cfg(2, 5, 4, 2);
        cfg.horizon = 2;
        let m = random_model(&mut rng, cfg);
        let x = rand_tensor(&mut rng, &[2, 5, 2], 1.5);
        let mut g = build_graph(&m, &x, Rounding::Relaxed, true).unwrap();
        let probe = rand_tensor(&mut rng, g.tape.value(g.out).shape(), 1.0);
        let params = g.params.clone();
        let mut grads = g.tape.backward(g.out, &probe).unwrap();
        let mut flat = Vec::new();
        m.visit_params(|s| flat.extend_from_slice(s));
        let analytic: Vec<f64> = params
            .iter()
            .flat_map(|&p| grads.take(p).unwrap().into_data())
            .collect();
        let flat_t = Tensor::from_vec(flat);
        let numeric = finite_diff(&flat_t, 1e-5, |f| probe_loss(&m, f.data(), &x, &probe));
        let analytic = Tensor::from_vec(analytic);
        let err = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(err <= 1e-3, "seed {seed}: rel err {err}");
    }
}

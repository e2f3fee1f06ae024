mod common;

use common::{analytic_acc, rand_tensor, random_config, random_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikyspace::energy::{ann_op_counts, compare_models, profile, EnergyTable, OpCounters};
use spikyspace::ssm::ModelConfig;
use spikyspace::train::{apply_threshold_scaling, convert};
use spikyspace::{Model, Tensor};

fn check(m: &Model<f64>, x: &Tensor<f64>) {
    let mut c = OpCounters::default();
    let (_, trace) = m.forward_snn(x, &mut c).unwrap();
    let want = analytic_acc(&m.config, x.shape()[0], &trace.blocks);
    for (k, v) in want {
        let got = match k.strip_suffix(".shift") {
            Some(layer) => c.layer(layer).shift,
            None => c.layer(&k).acc,
        };
        assert_eq!(got, v, "{k}");
    }
}

#[test]
fn counted_accumulations_match_spike_fanout() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let cfg = random_config(&mut rng);
        let m = random_model(&mut rng, cfg.clone());
        let x = rand_tensor(&mut rng, &[2, cfg.history, cfg.n_vars], 2.0);
        let s = convert(&m).unwrap();
        check(&s, &x);
        check(&apply_threshold_scaling(&s).unwrap(), &x);
    }
}

#[test]
fn comparisons_count_every_window_and_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = random_config(&mut rng);
    let m = random_model(&mut rng, cfg.clone());
    let s = convert(&m).unwrap();
    let x = rand_tensor(&mut rng, &[3, cfg.history, cfg.n_vars], 2.0);
    let mut c = OpCounters::default();
    s.forward_snn(&x, &mut c).unwrap();
    let rows = (3 * cfg.history) as u64;
    let (dh, n, r) = (cfg.d_hidden as u64, cfg.d_state as u64, cfg.r_delta() as u64);
    let t = 3;
    for bi in 0..cfg.n_blocks {
        let cmp = |s: &str| c.layer(&format!("block{bi}.enc.{s}")).cmp;
        assert_eq!(cmp("in"), rows * dh * t);
        assert_eq!(cmp("conv"), rows * dh * t);
        assert_eq!(cmp("dt_raw"), rows * r * t);
        assert_eq!(cmp("dt_code"), rows * dh * 3);
        assert_eq!(cmp("delta"), rows * dh * t);
        assert_eq!(cmp("h"), rows * dh * n * t);
        assert_eq!(cmp("y"), rows * dh * t);
        assert_eq!(cmp("res"), rows * dh * t);
    }
}

#[test]
fn quiet_input_triggers_no_spike_accumulations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = ModelConfig::new(2, 6, 2);
    cfg.d_hidden = 4;
    let mut m = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    spikyspace::train::calibrate(&mut m, &rand_tensor(&mut rng, &[3, 6, 2], 2.0)).unwrap();
    let s = convert(&m).unwrap();
    let mut c = OpCounters::default();
    s.forward_snn(&Tensor::zeros(&[1, 6, 2]), &mut c).unwrap();
    for layer in ["conv", "x_proj", "dt_proj", "scan.input", "scan.readout", "gate"] {
        assert_eq!(c.layer(&format!("block0.{layer}")).acc, 0, "{layer}");
    }
    assert!(c.layer("block0.conv.bias").acc > 0);
}

#[test]
fn reports_are_linear_in_the_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = random_config(&mut rng);
    let m = random_model(&mut rng, cfg.clone());
    let s = convert(&m).unwrap();
    let x = rand_tensor(&mut rng, &[2, cfg.history, cfg.n_vars], 2.0);
    let a = EnergyTable::new(0.9e-12, 4.6e-12, 0.1e-12, 0.3e-12).unwrap();
    let b = EnergyTable::new(0.1e-12, 3.1e-12, 0.5e-12, 0.2e-12).unwrap();
    let sum = EnergyTable::new(a.e_acc + b.e_acc, a.e_mac + b.e_mac, a.e_shift + b.e_shift, a.e_cmp + b.e_cmp).unwrap();
    let ra = profile(&s, &x, &a).unwrap();
    let rb = profile(&s, &x, &b).unwrap();
    let rs = profile(&s, &x, &sum).unwrap();
    let r3 = profile(&s, &x, &a.scaled(3.0)).unwrap();
    let close = |p: f64, q: f64| (p - q).abs() <= 1e-12 * q.abs().max(1e-30);
    assert!(close(rs.total_energy, ra.total_energy + rb.total_energy));
    assert!(close(r3.total_energy, 3.0 * ra.total_energy));
    for (k, v) in &ra.layer_energy {
        assert!(close(rs.layer_energy[k], v + rb.layer_energy[k]), "{k}");
    }
    let t = &ra.counters.total;
    let direct = t.acc as f64 * a.e_acc + t.mac as f64 * a.e_mac + t.shift as f64 * a.e_shift + t.cmp as f64 * a.e_cmp;
    assert!(close(ra.total_energy, direct));
    let layer_sum: f64 = ra.layer_energy.values().sum();
    assert!(close(layer_sum, ra.total_energy));
}

#[test]
fn profiling_requires_a_converted_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = random_config(&mut rng);
    let m = random_model(&mut rng, cfg.clone());
    let x = rand_tensor(&mut rng, &[1, cfg.history, cfg.n_vars], 1.0);
    let t = EnergyTable::new(1.0, 1.0, 1.0, 1.0).unwrap();
    assert!(profile(&m, &x, &t).is_err());
    let s = convert(&m).unwrap();
    assert!(compare_models(&s, &s, &x, &t).is_err());
    let cmp = compare_models(&m, &s, &x, &t).unwrap();
    assert_eq!(cmp.ann_energy, ann_op_counts(&m, 1).total.energy(&t));
}

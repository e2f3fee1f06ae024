//! Operation counting and energy estimation for spike-driven inference.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{Mode, Model, Site};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Accumulate (add) triggered by a spike or a bias.
    Acc,
    /// Multiply-accumulate in dense real arithmetic.
    Mac,
    /// Bit shift standing in for a power-of-two multiply.
    Shift,
    /// Threshold comparison of an integrate-and-fire neuron.
    Cmp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ops {
    pub acc: u64,
    pub mac: u64,
    pub shift: u64,
    pub cmp: u64,
}

impl Ops {
    fn slot(&mut self, kind: OpKind) -> &mut u64 {
        match kind {
            OpKind::Acc => &mut self.acc,
            OpKind::Mac => &mut self.mac,
            OpKind::Shift => &mut self.shift,
            OpKind::Cmp => &mut self.cmp,
        }
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        match kind {
            OpKind::Acc => self.acc,
            OpKind::Mac => self.mac,
            OpKind::Shift => self.shift,
            OpKind::Cmp => self.cmp,
        }
    }

    fn merge(&mut self, o: &Ops) {
        self.acc += o.acc;
        self.mac += o.mac;
        self.shift += o.shift;
        self.cmp += o.cmp;
    }

    pub fn energy(&self, t: &EnergyTable) -> f64 {
        self.acc as f64 * t.e_acc + self.mac as f64 * t.e_mac + self.shift as f64 * t.e_shift + self.cmp as f64 * t.e_cmp
    }
}

/// Running totals with a per-layer breakdown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpCounters {
    pub total: Ops,
    pub layers: BTreeMap<String, Ops>,
}

impl OpCounters {
    pub fn add(&mut self, layer: &str, kind: OpKind, n: u64) {
        if n == 0 {
            return;
        }
        *self.total.slot(kind) += n;
        let entry = match self.layers.get_mut(layer) {
            Some(e) => e,
            None => self.layers.entry(layer.to_string()).or_default(),
        };
        *entry.slot(kind) += n;
    }

    pub fn layer(&self, name: &str) -> Ops {
        self.layers.get(name).copied().unwrap_or_default()
    }

    /// Explicit reduction of counters from independent passes.
    pub fn merge(&mut self, other: &OpCounters) {
        self.total.merge(&other.total);
        for (k, v) in &other.layers {
            self.layers.entry(k.clone()).or_default().merge(v);
        }
    }
}

/// Energy per operation in joules. No defaults: values are technology
/// constants the user supplies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub e_acc: f64,
    pub e_mac: f64,
    pub e_shift: f64,
    pub e_cmp: f64,
}

impl EnergyTable {
    pub fn new(e_acc: f64, e_mac: f64, e_shift: f64, e_cmp: f64) -> Result<Self> {
        let t = Self {
            e_acc,
            e_mac,
            e_shift,
            e_cmp,
        };
        for (k, v) in [("e_acc", e_acc), ("e_mac", e_mac), ("e_shift", e_shift), ("e_cmp", e_cmp)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(t)
    }

    /// Reads `e_acc`, `e_mac`, `e_shift`, `e_cmp` from `key = value` text;
    /// every key is required.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let get = |k: &str| -> Result<f64> {
            kv.get_f64(k)?
                .ok_or_else(|| Error::Config(format!("energy table is missing `{k}`")))
        };
        let t = Self::new(get("e_acc")?, get("e_mac")?, get("e_shift")?, get("e_cmp")?)?;
        kv.reject_unknown(&["e_acc", "e_mac", "e_shift", "e_cmp"])?;
        Ok(t)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            e_acc: self.e_acc * c,
            e_mac: self.e_mac * c,
            e_shift: self.e_shift * c,
            e_cmp: self.e_cmp * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub t_steps: usize,
    pub samples: usize,
    pub counters: OpCounters,
    pub table: EnergyTable,
    pub layer_energy: BTreeMap<String, f64>,
    pub total_energy: f64,
    /// Spikes / (neurons × T) per `block<i>.<site>`.
    pub site_rates: BTreeMap<String, f64>,
    pub mean_rate: f64,
}

impl EnergyReport {
    pub fn new(counters: OpCounters, table: EnergyTable, t_steps: usize, samples: usize, site_rates: BTreeMap<String, f64>) -> Self {
        let layer_energy: BTreeMap<String, f64> = counters.layers.iter().map(|(k, v)| (k.clone(), v.energy(&table))).collect();
        let total_energy = counters.total.energy(&table);
        let mean_rate = if site_rates.is_empty() {
            0.0
        } else {
            site_rates.values().sum::<f64>() / site_rates.len() as f64
        };
        Self {
            t_steps,
            samples,
            counters,
            table,
            layer_energy,
            total_energy,
            site_rates,
            mean_rate,
        }
    }

    /// Flat `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let t = &self.counters.total;
        let _ = writeln!(s, "t_steps = {}", self.t_steps);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "total.acc = {}", t.acc);
        let _ = writeln!(s, "total.mac = {}", t.mac);
        let _ = writeln!(s, "total.shift = {}", t.shift);
        let _ = writeln!(s, "total.cmp = {}", t.cmp);
        let _ = writeln!(s, "total.energy_j = {:e}", self.total_energy);
        let _ = writeln!(s, "mean_rate = {}", self.mean_rate);
        for (k, v) in &self.counters.layers {
            let _ = writeln!(s, "layer.{k}.acc = {}", v.acc);
            let _ = writeln!(s, "layer.{k}.mac = {}", v.mac);
            let _ = writeln!(s, "layer.{k}.shift = {}", v.shift);
            let _ = writeln!(s, "layer.{k}.cmp = {}", v.cmp);
            let _ = writeln!(s, "layer.{k}.energy_j = {:e}", self.layer_energy[k]);
        }
        for (k, v) in &self.site_rates {
            let _ = writeln!(s, "rate.{k} = {v}");
        }
        s
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "T = {}, samples = {}", self.t_steps, self.samples)?;
        writeln!(
            f,
            "{:<28} {:>12} {:>12} {:>10} {:>10} {:>12}",
            "layer", "acc", "mac", "shift", "cmp", "energy (J)"
        )?;
        for (k, v) in &self.counters.layers {
            writeln!(
                f,
                "{:<28} {:>12} {:>12} {:>10} {:>10} {:>12.4e}",
                k, v.acc, v.mac, v.shift, v.cmp, self.layer_energy[k]
            )?;
        }
        let t = &self.counters.total;
        writeln!(
            f,
            "{:<28} {:>12} {:>12} {:>10} {:>10} {:>12.4e}",
            "total", t.acc, t.mac, t.shift, t.cmp, self.total_energy
        )?;
        writeln!(f, "spike rates:")?;
        for (k, v) in &self.site_rates {
            writeln!(f, "  {k:<20} {v:.4}")?;
        }
        write!(f, "  {:<20} {:.4}", "mean", self.mean_rate)
    }
}

/// Runs spike-driven inference with counting enabled.
pub fn profile<T: Scalar>(model: &Model<T>, inputs: &Tensor<T>, table: &EnergyTable) -> Result<EnergyReport> {
    if model.mode != Mode::Snn {
        return Err(Error::Mode {
            expected: "snn",
            found: model.mode.name(),
        });
    }
    let mut counters = OpCounters::default();
    let (_, trace) = model.forward_snn(inputs, &mut counters)?;
    let t_steps = model.blocks[0].spike(Site::In).map_or(1, |s| s.t_steps);
    Ok(EnergyReport::new(
        counters,
        *table,
        t_steps,
        inputs.shape()[0],
        trace.site_rates(),
    ))
}

/// Dense operation count of the quantized-ANN forward for a batch of `batch` windows.
pub fn ann_op_counts<T: Scalar>(model: &Model<T>, batch: usize) -> OpCounters {
    let cfg = &model.config;
    let (dv, dh, n, r, k) = (cfg.n_vars, cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
    let rows = (batch * cfg.history) as u64;
    let (dv, dh, n, r, k) = (dv as u64, dh as u64, n as u64, r as u64, k as u64);
    let mut c = OpCounters::default();
    for bi in 0..cfg.n_blocks {
        let l = |s: &str| format!("block{bi}.{s}");
        c.add(&l("norm"), OpKind::Mac, rows * dv * 2);
        c.add(&l("in_proj"), OpKind::Mac, rows * dv * 2 * dh);
        c.add(&l("conv"), OpKind::Mac, rows * dh * k);
        c.add(&l("x_proj"), OpKind::Mac, rows * dh * (r + 2 * n));
        c.add(&l("x_proj.bias"), OpKind::Acc, rows * (r + 2 * n));
        c.add(&l("dt_proj"), OpKind::Mac, rows * r * dh);
        c.add(&l("dt_proj.bias"), OpKind::Acc, rows * dh);
        c.add(&l("dt_act"), OpKind::Mac, rows * dh);
        c.add(&l("scan.decay"), OpKind::Mac, rows * dh * n);
        c.add(&l("scan.input"), OpKind::Mac, rows * dh * n * 2);
        c.add(&l("scan.readout"), OpKind::Mac, rows * dh * (n + 1));
        c.add(&l("gate_act"), OpKind::Mac, rows * dh);
        c.add(&l("gate"), OpKind::Mac, rows * dh);
        c.add(&l("out_proj"), OpKind::Mac, rows * dh * dv);
        c.add(&l("out_proj.bias"), OpKind::Acc, rows * dv);
        c.add(&l("residual"), OpKind::Acc, rows * dv);
    }
    let b = batch as u64;
    c.add("head", OpKind::Mac, b * dv * (cfg.history * cfg.horizon) as u64);
    c.add("head.bias", OpKind::Acc, b * dv * cfg.horizon as u64);
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyComparison {
    pub ann_energy: f64,
    pub snn_energy: f64,
    /// `snn / ann`.
    pub ratio: f64,
    /// `100 · (1 − ratio)`.
    pub reduction_pct: f64,
}

impl fmt::Display for EnergyComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ann {:.4e} J, snn {:.4e} J, ratio {:.4}, reduction {:.2}%",
            self.ann_energy, self.snn_energy, self.ratio, self.reduction_pct
        )
    }
}

/// Weighs dense and spike-driven operation counts with the same table.
pub fn compare_ann_energy(ann: &OpCounters, snn: &OpCounters, table: &EnergyTable) -> EnergyComparison {
    let ann_energy = ann.total.energy(table);
    let snn_energy = snn.total.energy(table);
    let ratio = if ann_energy > 0.0 { snn_energy / ann_energy } else { f64::NAN };
    EnergyComparison {
        ann_energy,
        snn_energy,
        ratio,
        reduction_pct: 100.0 * (1.0 - ratio),
    }
}

/// Dense count of the source ANN against the profiled count of its
/// converted SNN on the same inputs.
pub fn compare_models<T: Scalar>(ann: &Model<T>, snn: &Model<T>, inputs: &Tensor<T>, table: &EnergyTable) -> Result<EnergyComparison> {
    if ann.mode != Mode::Ann {
        return Err(Error::Mode {
            expected: "ann",
            found: ann.mode.name(),
        });
    }
    let report = profile(snn, inputs, table)?;
    let dense = ann_op_counts(ann, inputs.shape()[0]);
    Ok(compare_ann_energy(&dense, &report.counters, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::QuantizerParams;
    use crate::spike::{encode_quantized, spiking_matvec};
    use crate::test_util::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> EnergyTable {
        EnergyTable::new(0.9e-12, 4.6e-12, 0.1e-12, 0.05e-12).unwrap()
    }

    #[test]
    fn table_requires_every_key() {
        let t = EnergyTable::parse("e_acc = 1e-12\ne_mac = 4e-12\ne_shift = 1e-13\ne_cmp = 0\n").unwrap();
        assert_eq!(t.e_mac, 4e-12);
        assert!(EnergyTable::parse("e_acc = 1\ne_mac = 1\ne_shift = 1\n").is_err());
        assert!(EnergyTable::parse("e_acc = -1\ne_mac = 1\ne_shift = 1\ne_cmp = 1\n").is_err());
        assert!(EnergyTable::parse("e_acc = 1\ne_mac = 1\ne_shift = 1\ne_cmp = 1\ne_foo = 2\n").is_err());
    }

    #[test]
    fn single_spike_into_eight_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QuantizerParams::asymmetric(0.5, 0.0, 2).unwrap();
        let x = Tensor::from_vec(vec![0.0, 0.5, 0.0]);
        let s = encode_quantized(&x, &q).unwrap();
        let (_, accs) = spiking_matvec(&rand_tensor(&mut rng, &[3, 8]), &Tensor::zeros(&[8]), &s).unwrap();
        assert_eq!(accs, 8);
        let zero = encode_quantized(&Tensor::zeros(&[3]), &q).unwrap();
        let (_, accs) = spiking_matvec(&rand_tensor(&mut rng, &[3, 8]), &Tensor::zeros(&[8]), &zero).unwrap();
        assert_eq!(accs, 0);
    }

    #[test]
    fn parity_at_unit_window_and_full_rate() {
        // T = 1 (one bit), every input spiking once: one ACC per weight, same
        // as one MAC per weight in the dense layer.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d_in, d_out) = (5, 7);
        let q = QuantizerParams::asymmetric(0.3, 0.0, 1).unwrap();
        let s = encode_quantized(&Tensor::full(&[d_in], 0.3), &q).unwrap();
        assert_eq!(s.rate(), 1.0);
        let (_, accs) = spiking_matvec(&rand_tensor(&mut rng, &[d_in, d_out]), &Tensor::zeros(&[d_out]), &s).unwrap();
        let mut snn = OpCounters::default();
        snn.add("fc", OpKind::Acc, accs);
        let mut ann = OpCounters::default();
        ann.add("fc", OpKind::Mac, (d_in * d_out) as u64);
        let t = EnergyTable::new(1e-12, 1e-12, 0.0, 0.0).unwrap();
        let cmp = compare_ann_energy(&ann, &snn, &t);
        assert_eq!(cmp.ratio, 1.0);
        assert_eq!(cmp.reduction_pct, 0.0);
    }

    #[test]
    fn totals_are_linear_in_table() {
        let mut c = OpCounters::default();
        c.add("a", OpKind::Acc, 10);
        c.add("a", OpKind::Shift, 3);
        c.add("b", OpKind::Mac, 7);
        c.add("b", OpKind::Cmp, 11);
        let r1 = EnergyReport::new(c.clone(), table(), 3, 1, BTreeMap::new());
        let r2 = EnergyReport::new(c.clone(), table().scaled(2.0), 3, 1, BTreeMap::new());
        assert_eq!(r2.total_energy, 2.0 * r1.total_energy);
        let want = 10.0 * 0.9e-12 + 3.0 * 0.1e-12 + 7.0 * 4.6e-12 + 11.0 * 0.05e-12;
        assert!((r1.total_energy - want).abs() <= 1e-24);
        let sum: f64 = r1.layer_energy.values().sum();
        assert!((sum - r1.total_energy).abs() <= 1e-24);
        assert!(r1.to_key_values().contains("layer.b.mac = 7"));
    }

    #[test]
    fn merge_is_a_sum() {
        let mut a = OpCounters::default();
        a.add("x", OpKind::Acc, 2);
        let mut b = OpCounters::default();
        b.add("x", OpKind::Acc, 5);
        b.add("y", OpKind::Cmp, 1);
        a.merge(&b);
        assert_eq!(a.total.acc, 7);
        assert_eq!(a.layer("y").cmp, 1);
    }
}

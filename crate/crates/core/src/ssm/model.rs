use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::energy::OpCounters;
use crate::error::{Error, Result};
use crate::quantize::{QuantMode, QuantizerParams, Rounding};
use crate::scalar::Scalar;
use crate::spike::SpikeSiteConfig;
use crate::tensor::Tensor;

use super::ann::build_graph;
use super::snn::{model_forward_snn, SnnTrace};

/// Architecture and shape hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of series variables (channels).
    pub n_vars: usize,
    /// Input window length.
    pub history: usize,
    /// Forecast horizon.
    pub horizon: usize,
    pub d_hidden: usize,
    pub d_state: usize,
    /// Δ bottleneck width; `ceil(d_hidden / 8)` when absent.
    pub r_delta: Option<usize>,
    pub conv_k: usize,
    pub n_blocks: usize,
    /// Activation bit width.
    pub bits: u32,
    pub eps: f64,
}

impl ModelConfig {
    pub fn new(n_vars: usize, history: usize, horizon: usize) -> Self {
        Self {
            n_vars,
            history,
            horizon,
            d_hidden: 16,
            d_state: 4,
            r_delta: None,
            conv_k: 4,
            n_blocks: 1,
            bits: 2,
            eps: 1e-6,
        }
    }

    pub const KEYS: [&'static str; 8] = ["history", "horizon", "d_hidden", "d_state", "r_delta", "conv_k", "n_blocks", "eps"];

    /// Overrides fields with any architecture keys present.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, slot) in [
            ("history", &mut self.history),
            ("horizon", &mut self.horizon),
            ("d_hidden", &mut self.d_hidden),
            ("d_state", &mut self.d_state),
            ("conv_k", &mut self.conv_k),
            ("n_blocks", &mut self.n_blocks),
        ] {
            if let Some(v) = kv.get_usize(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.get_usize("r_delta")? {
            self.r_delta = Some(v);
        }
        if let Some(v) = kv.get_f64("eps")? {
            self.eps = v;
        }
        self.validate()
    }

    pub fn r_delta(&self) -> usize {
        self.r_delta.unwrap_or(self.d_hidden.div_ceil(8))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_vars", self.n_vars),
            ("history", self.history),
            ("horizon", self.horizon),
            ("d_hidden", self.d_hidden),
            ("d_state", self.d_state),
            ("r_delta", self.r_delta()),
            ("conv_k", self.conv_k),
            ("n_blocks", self.n_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 1..=16, got {}", self.bits)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Activation quantization sites of a block, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Data half of the input projection.
    In,
    /// Depthwise convolution output.
    Conv,
    /// Δ slice of the Split projection.
    DtRaw,
    /// Δ̃: integer codes fed to PTSoftplus.
    DtCode,
    /// Step size entering the scan.
    Delta,
    /// Scan state.
    H,
    /// Scan output.
    Y,
    /// Residual gate half of the input projection.
    Res,
}

impl Site {
    pub const ALL: [Site; 8] = [
        Site::In,
        Site::Conv,
        Site::DtRaw,
        Site::DtCode,
        Site::Delta,
        Site::H,
        Site::Y,
        Site::Res,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::In => "in",
            Site::Conv => "conv",
            Site::DtRaw => "dt_raw",
            Site::DtCode => "dt_code",
            Site::Delta => "delta",
            Site::H => "h",
            Site::Y => "y",
            Site::Res => "res",
        }
    }

    pub fn mode(self) -> QuantMode {
        match self {
            Site::DtCode => QuantMode::Symmetric,
            _ => QuantMode::Asymmetric,
        }
    }

    /// Whether the site emits spike trains after conversion.
    pub fn spiking(self) -> bool {
        self != Site::DtCode
    }

    /// Scan sites eligible for threshold scaling.
    pub fn scan_state(self) -> bool {
        matches!(self, Site::H | Site::Y)
    }
}

/// Smallest Δ offset; keeps every quantized step size positive.
pub const DELTA_BETA_FLOOR: f64 = 1e-3;

/// Weights and per-site quantization state of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub g_norm: Tensor<T>,
    pub w_in: Tensor<T>,
    pub conv_k: Tensor<T>,
    pub w_x: Tensor<T>,
    pub b_x: Tensor<T>,
    pub w_dt: Tensor<T>,
    pub b_dt: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub quant: [Option<QuantizerParams<T>>; 8],
    pub spikes: [Option<SpikeSiteConfig<T>>; 8],
}

pub(crate) const BLOCK_TENSORS: [&str; 11] = [
    "g_norm", "w_in", "conv_k", "w_x", "b_x", "w_dt", "b_dt", "a_log", "d_skip", "w_o", "b_o",
];

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).unwrap()
}

impl<T: Scalar> BlockParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (dv, dh, n, r, k) = (cfg.n_vars, cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
        let fan = |f: usize| 1.0 / (f as f64).sqrt();
        let mut a_log = Vec::with_capacity(dh * n);
        for _ in 0..dh {
            for i in 0..n {
                let frac = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
                // −exp(A_log) spans [−1, −1/n] log-uniformly.
                a_log.push(T::lit(-(n as f64).ln() * (1.0 - frac)));
            }
        }
        Self {
            g_norm: Tensor::ones(&[dv]),
            w_in: uniform(rng, &[dv, 2 * dh], fan(dv)),
            conv_k: uniform(rng, &[dh, k], fan(k)),
            w_x: uniform(rng, &[dh, r + 2 * n], fan(dh)),
            b_x: Tensor::zeros(&[r + 2 * n]),
            w_dt: uniform(rng, &[r, dh], fan(r)),
            b_dt: Tensor::zeros(&[dh]),
            a_log: Tensor::new(&[dh, n], a_log).unwrap(),
            d_skip: Tensor::ones(&[dh]),
            w_o: uniform(rng, &[dh, dv], fan(dh)),
            b_o: Tensor::zeros(&[dv]),
            quant: [None; 8],
            spikes: [None; 8],
        }
    }

    /// Block with every weight zero and no quantizers; the block then
    /// passes its input through unchanged.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (dv, dh, n, r, k) = (cfg.n_vars, cfg.d_hidden, cfg.d_state, cfg.r_delta(), cfg.conv_k);
        Self {
            g_norm: Tensor::ones(&[dv]),
            w_in: Tensor::zeros(&[dv, 2 * dh]),
            conv_k: Tensor::zeros(&[dh, k]),
            w_x: Tensor::zeros(&[dh, r + 2 * n]),
            b_x: Tensor::zeros(&[r + 2 * n]),
            w_dt: Tensor::zeros(&[r, dh]),
            b_dt: Tensor::zeros(&[dh]),
            a_log: Tensor::zeros(&[dh, n]),
            d_skip: Tensor::zeros(&[dh]),
            w_o: Tensor::zeros(&[dh, dv]),
            b_o: Tensor::zeros(&[dv]),
            quant: [None; 8],
            spikes: [None; 8],
        }
    }

    /// Weight tensors in declaration order (see `BLOCK_TENSORS`).
    pub fn tensors(&self) -> [&Tensor<T>; 11] {
        [
            &self.g_norm,
            &self.w_in,
            &self.conv_k,
            &self.w_x,
            &self.b_x,
            &self.w_dt,
            &self.b_dt,
            &self.a_log,
            &self.d_skip,
            &self.w_o,
            &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.g_norm,
            &mut self.w_in,
            &mut self.conv_k,
            &mut self.w_x,
            &mut self.b_x,
            &mut self.w_dt,
            &mut self.b_dt,
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn q(&self, site: Site) -> Option<&QuantizerParams<T>> {
        self.quant[site.index()].as_ref()
    }

    pub fn spike(&self, site: Site) -> Option<&SpikeSiteConfig<T>> {
        self.spikes[site.index()].as_ref()
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        for ((name, have), want) in BLOCK_TENSORS.iter().zip(self.tensors()).zip(want.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::Shape {
                    op: name,
                    lhs: have.shape().to_vec(),
                    rhs: want.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Whether a model runs quantized real arithmetic or spike trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ann,
    Snn,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ann => "ann",
            Mode::Snn => "snn",
        }
    }
}

/// Per-variable z-score statistics of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % n;
            *v = T::lit((v.as_f64() - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn invert<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % n;
            *v = T::lit(v.as_f64() * self.std[c] + self.mean[c]);
        }
        out
    }
}

/// Stack of blocks followed by the time-axis forecasting head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams<T>>,
    pub w_head: Tensor<T>,
    pub b_head: Tensor<T>,
    pub mode: Mode,
    pub norm: Option<Normalization>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks).map(|_| BlockParams::init(&config, rng)).collect();
        let w_head = uniform(rng, &[config.history, config.horizon], 1.0 / (config.history as f64).sqrt());
        let b_head = Tensor::zeros(&[config.horizon]);
        Ok(Self {
            config,
            blocks,
            w_head,
            b_head,
            mode: Mode::Ann,
            norm: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_blocks {
            return Err(Error::Config(format!(
                "{} blocks present, config says {}",
                self.blocks.len(),
                self.config.n_blocks
            )));
        }
        for b in &self.blocks {
            b.check_shapes(&self.config)?;
        }
        let (h, g) = (self.config.history, self.config.horizon);
        if self.w_head.shape() != [h, g] || self.b_head.shape() != [g] {
            return Err(Error::Shape {
                op: "head",
                lhs: self.w_head.shape().to_vec(),
                rhs: vec![h, g],
            });
        }
        Ok(())
    }

    /// Names of every trainable slot in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            names.extend(BLOCK_TENSORS.iter().map(|n| format!("block{bi}.{n}")));
            for site in Site::ALL {
                if let Some(q) = b.q(site) {
                    names.push(format!("block{bi}.q_{}.alpha", site.name()));
                    if q.mode == QuantMode::Asymmetric {
                        names.push(format!("block{bi}.q_{}.beta", site.name()));
                    }
                }
            }
        }
        names.push("w_head".into());
        names.push("b_head".into());
        names
    }

    /// Visits every trainable slot in declaration order; quantizer step
    /// sizes and offsets appear as one-element slices.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for b in &mut self.blocks {
            for t in b.tensors_mut() {
                f(t.data_mut());
            }
            for q in b.quant.iter_mut().flatten() {
                f(std::slice::from_mut(&mut q.alpha));
                if q.mode == QuantMode::Asymmetric {
                    f(std::slice::from_mut(&mut q.beta));
                }
            }
        }
        f(self.w_head.data_mut());
        f(self.b_head.data_mut());
    }

    pub fn visit_params(&self, mut f: impl FnMut(&[T])) {
        for b in &self.blocks {
            for t in b.tensors() {
                f(t.data());
            }
            for q in b.quant.iter().flatten() {
                f(std::slice::from_ref(&q.alpha));
                if q.mode == QuantMode::Asymmetric {
                    f(std::slice::from_ref(&q.beta));
                }
            }
        }
        f(self.w_head.data());
        f(self.b_head.data());
    }

    /// Weight tensors only (no quantizer state), in declaration order.
    pub fn weight_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.w_head);
        out.push(&self.b_head);
        out
    }

    pub fn weight_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }

    /// Restores quantizer invariants after an optimizer step.
    pub fn clamp_quantizers(&mut self) {
        for b in &mut self.blocks {
            for site in Site::ALL {
                if let Some(q) = &mut b.quant[site.index()] {
                    let floor = (site == Site::Delta).then(|| T::lit(DELTA_BETA_FLOOR));
                    q.clamp_after_step(floor);
                }
            }
        }
    }

    /// `block<i>.<site>` for every site without a quantizer.
    pub fn unquantized_sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for site in Site::ALL {
                if b.q(site).is_none() {
                    out.push(format!("block{bi}.{}", site.name()));
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, l, c] if *l == self.config.history && *c == self.config.n_vars => Ok(()),
            s => Err(Error::Shape {
                op: "model_input",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.history, self.config.n_vars],
            }),
        }
    }

    /// Quantized real-arithmetic forward: `[B, history, n_vars] → [B, horizon, n_vars]`.
    pub fn forward_ann(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let g = build_graph(self, x, Rounding::Nearest, false)?;
        Ok(g.tape.value(g.out).clone())
    }

    /// Spike-driven forward; requires a converted model.
    pub fn forward_snn(&self, x: &Tensor<T>, counters: &mut OpCounters) -> Result<(Tensor<T>, SnnTrace<T>)> {
        if self.mode != Mode::Snn {
            return Err(Error::Mode {
                expected: "snn",
                found: self.mode.name(),
            });
        }
        self.check_input(x)?;
        model_forward_snn(self, x, counters)
    }

    /// Forward in the model's own mode.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Ann => self.forward_ann(x),
            Mode::Snn => Ok(self.forward_snn(x, &mut OpCounters::default())?.0),
        }
    }

    /// Copy with every real parameter rounded to `f32` precision.
    pub fn snapped_to_f32(&self) -> Self {
        let mut m = self.clone();
        m.visit_params_mut(|s| s.iter_mut().for_each(|v| *v = T::lit(v.as_f64() as f32 as f64)));
        for b in &mut m.blocks {
            for sp in b.spikes.iter_mut().flatten() {
                sp.scale = T::lit(sp.scale.as_f64() as f32 as f64);
                sp.offset = T::lit(sp.offset.as_f64() as f32 as f64);
                sp.theta = sp.scale * T::from_usize(sp.gain).unwrap();
            }
        }
        m
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cq = |q: &QuantizerParams<T>| QuantizerParams {
            alpha: U::lit(q.alpha.as_f64()),
            beta: U::lit(q.beta.as_f64()),
            bits: q.bits,
            mode: q.mode,
        };
        let cs = |s: &SpikeSiteConfig<T>| SpikeSiteConfig {
            t_steps: s.t_steps,
            theta: U::lit(s.theta.as_f64()),
            scale: U::lit(s.scale.as_f64()),
            offset: U::lit(s.offset.as_f64()),
            gain: s.gain,
        };
        Model {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    g_norm: b.g_norm.cast(),
                    w_in: b.w_in.cast(),
                    conv_k: b.conv_k.cast(),
                    w_x: b.w_x.cast(),
                    b_x: b.b_x.cast(),
                    w_dt: b.w_dt.cast(),
                    b_dt: b.b_dt.cast(),
                    a_log: b.a_log.cast(),
                    d_skip: b.d_skip.cast(),
                    w_o: b.w_o.cast(),
                    b_o: b.b_o.cast(),
                    quant: b.quant.map(|q| q.as_ref().map(cq)),
                    spikes: b.spikes.map(|s| s.as_ref().map(cs)),
                })
                .collect(),
            w_head: self.w_head.cast(),
            b_head: self.b_head.cast(),
            mode: self.mode,
            norm: self.norm.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_transition() {
        let cfg = ModelConfig::new(3, 8, 2);
        let m = Model::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.validate().unwrap();
        assert_eq!(cfg.r_delta(), 2);
        let a = super::super::transition(&m.blocks[0].a_log);
        assert!(a.data().iter().all(|&v| v < 0.0 && v >= -1.0 - 1e-12 && v <= -0.25 + 1e-12));
        assert!((a[0] + 0.25).abs() < 1e-12 && (a[3] + 1.0).abs() < 1e-12);
        assert_eq!(m.param_names().len(), 13);
    }

    #[test]
    fn config_from_keys() {
        let mut cfg = ModelConfig::new(2, 12, 3);
        let kv = KeyValues::parse("d_hidden = 32\nr_delta = 3\nhorizon = 6\neps = 1e-5").unwrap();
        cfg.apply(&kv).unwrap();
        assert_eq!((cfg.d_hidden, cfg.r_delta(), cfg.horizon, cfg.history), (32, 3, 6, 12));
        assert_eq!(cfg.eps, 1e-5);
        assert!(cfg.apply(&KeyValues::parse("conv_k = 0").unwrap()).is_err());
        assert!(cfg.apply(&KeyValues::parse("n_blocks = two").unwrap()).is_err());
    }

    #[test]
    fn visit_order_matches_names() {
        let cfg = ModelConfig::new(2, 4, 1);
        let mut m = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        m.blocks[0].quant[Site::DtCode.index()] = Some(QuantizerParams::symmetric(0.5, 2).unwrap());
        m.blocks[0].quant[Site::In.index()] = Some(QuantizerParams::asymmetric(0.5, 0.0, 2).unwrap());
        let mut n = 0;
        m.visit_params_mut(|_| n += 1);
        assert_eq!(n, m.param_names().len());
        assert_eq!(m.param_names()[11], "block0.q_in.alpha");
        assert_eq!(m.param_names()[13], "block0.q_dt_code.alpha");
    }
}

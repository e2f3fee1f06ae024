//! Quantization-aware training, step-size calibration and ANN→SNN conversion.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::pt_softplus;
use crate::config::KeyValues;
use crate::data::{WindowSet, Windows};
use crate::error::{Error, Result};
use crate::quantize::{init_alpha, QuantizerParams, Rounding};
use crate::scalar::Scalar;
use crate::spike::{threshold_scale, window_for_bits, SpikeSiteConfig};
use crate::ssm::{build_graph, Mode, Model, ModelConfig, Site, DELTA_BETA_FLOOR};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub bits: u32,
    pub seed: u64,
    /// Training windows used to initialize quantizer step sizes.
    pub calib_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 5e-4,
            max_epochs: 1000,
            patience: 20,
            bits: 2,
            seed: 0,
            calib_size: 256,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 7] = ["batch_size", "lr", "max_epochs", "patience", "bits", "seed", "calib_size"];

    /// Overrides defaults with any training keys present.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.get("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.get("lr")? {
            self.lr = v;
        }
        if let Some(v) = kv.get("max_epochs")? {
            self.max_epochs = v;
        }
        if let Some(v) = kv.get("patience")? {
            self.patience = v;
        }
        if let Some(v) = kv.get("bits")? {
            self.bits = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("calib_size")? {
            self.calib_size = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.calib_size == 0 {
            return Err(Error::Config("batch_size and calib_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(1..=16).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 1..=16, got {}", self.bits)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a parameter slice at step `t ≥ 1`.
pub fn adam_step<T: Scalar>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: i32, c: &AdamConfig) {
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam moments for every parameter slot of a model.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<M: Trainable<T>>(&mut self, model: &mut M, grads: &[Vec<T>]) -> Result<()> {
        self.t += 1;
        let (t, cfg) = (self.t, self.config);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        let mut err = None;
        model.visit_params_mut(&mut |p: &mut [T]| {
            let Some(g) = grads.get(k).filter(|g| g.len() == p.len()) else {
                err.get_or_insert(k);
                k += 1;
                return;
            };
            if ms.len() <= k {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            adam_step(p, g, &mut ms[k], &mut vs[k], t, &cfg);
            k += 1;
        });
        match err {
            Some(slot) => Err(Error::InvalidArgument(format!("gradient slot {slot} missing or misshapen"))),
            None if k != grads.len() => Err(Error::InvalidArgument(format!("{} gradients for {k} slots", grads.len()))),
            None => Ok(()),
        }
    }
}

/// A set of training examples addressable by index.
pub trait Samples {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Samples for WindowSet<T> {
    fn len(&self) -> usize {
        WindowSet::len(self)
    }
}

/// A model the training loop can fit.
pub trait Trainable<T: Scalar>: Clone {
    type Data: Samples + ?Sized;

    /// Mean loss over the selected samples and its gradient per parameter slot.
    fn loss_and_grads(&self, data: &Self::Data, batch: &[usize]) -> Result<(T, Vec<Vec<T>>)>;

    /// Mean loss over every sample.
    fn eval_loss(&self, data: &Self::Data) -> Result<T>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T]));

    /// Restores parameter invariants after an optimizer step.
    fn after_step(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Lowest validation loss seen so far.
    pub best_val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters at the best validation epoch.
    pub model: M,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mini-batch Adam on shuffled training indices with early stopping on the
/// validation loss.
pub fn train<T: Scalar, M: Trainable<T>>(model: M, train_data: &M::Data, val_data: &M::Data, cfg: &TrainConfig) -> Result<TrainOutcome<M>> {
    train_with(model, train_data, val_data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar, M: Trainable<T>>(
    mut model: M,
    train_data: &M::Data,
    val_data: &M::Data,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    if val_data.is_empty() {
        return Err(Error::EmptyDataset("validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::new(cfg.lr));
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = model.loss_and_grads(train_data, batch)?;
            let l = loss.as_f64();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value: l });
            }
            adam.step(&mut model, &grads)?;
            model.after_step();
            total += l * batch.len() as f64;
        }
        let val = model.eval_loss(val_data)?.as_f64();
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                value: val,
            });
        }
        if val < best_val {
            best_val = val;
            best = model.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
        }
        history.push(EpochStats {
            epoch,
            train_loss: total / train_data.len() as f64,
            val_loss: val,
            best_val,
        });
        on_epoch(&history[history.len() - 1]);
        if since >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        stopped_early,
    })
}

const EVAL_CHUNK: usize = 256;

/// Forward in the model's own mode, `chunk` windows at a time.
pub fn predict<T: Scalar>(model: &Model<T>, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "predict",
            lhs: s,
            rhs: vec![0, model.config.history, model.config.n_vars],
        });
    }
    let stride = s[1] * s[2];
    let mut out = Vec::new();
    for start in (0..s[0]).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(s[0]);
        let xb = Tensor::new(&[end - start, s[1], s[2]], x.data()[start * stride..end * stride].to_vec())?;
        out.extend(model.forward(&xb)?.into_data());
    }
    Tensor::new(&[s[0], model.config.horizon, model.config.n_vars], out)
}

impl<T: Scalar> Trainable<T> for Model<T> {
    type Data = WindowSet<T>;

    fn loss_and_grads(&self, data: &WindowSet<T>, batch: &[usize]) -> Result<(T, Vec<Vec<T>>)> {
        let (x, y) = data.gather(batch);
        let mut g = build_graph(self, &x, Rounding::Nearest, true)?;
        let loss = g.tape.mse(g.out, &y)?;
        let value = g.tape.value(loss)[0];
        let lens: Vec<usize> = g.params.iter().map(|&p| g.tape.value(p).len()).collect();
        let mut grads = g.tape.backward(loss, &Tensor::scalar(T::one()))?;
        let out = g
            .params
            .iter()
            .zip(lens)
            .map(|(&p, n)| grads.take(p).map_or_else(|| vec![T::zero(); n], Tensor::into_data))
            .collect();
        Ok((value, out))
    }

    fn eval_loss(&self, data: &WindowSet<T>) -> Result<T> {
        let pred = predict(self, &data.x, EVAL_CHUNK)?;
        let n = T::from_usize(pred.len().max(1)).unwrap();
        let sse: T = pred.data().iter().zip(data.y.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(sse / n)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        Model::visit_params_mut(self, f)
    }

    fn after_step(&mut self) {
        self.clamp_quantizers();
    }
}

/// Installs a quantizer on every site that lacks one, in forward order,
/// from the values the partially quantized model produces on `x`.
///
/// Asymmetric sites start at offset zero with the mean-of-large-values
/// step size. The Δ site spans the image of the Δ̃ code range under
/// PTSoftplus.
pub fn calibrate<T: Scalar>(model: &mut Model<T>, x: &Tensor<T>) -> Result<()> {
    let bits = model.config.bits;
    for bi in 0..model.blocks.len() {
        for site in Site::ALL {
            if model.blocks[bi].q(site).is_some() {
                continue;
            }
            let q = match (site, model.blocks[bi].q(Site::DtCode)) {
                (Site::Delta, Some(dt)) => {
                    let lo = pt_softplus(T::from_i64(dt.qn()).unwrap());
                    let hi = pt_softplus(T::from_i64(dt.qp()).unwrap());
                    let qp = T::from_i64((1i64 << bits) - 1).unwrap();
                    let beta = lo.max(T::lit(DELTA_BETA_FLOOR));
                    QuantizerParams::asymmetric((hi - beta) / qp, beta, bits)?
                }
                _ => {
                    let g = build_graph(model, x, Rounding::Nearest, false)?;
                    let alpha = init_alpha(&g.site_values(bi, site));
                    match site {
                        Site::DtCode => QuantizerParams::symmetric(alpha, bits)?,
                        Site::Delta => QuantizerParams::asymmetric(alpha, T::lit(DELTA_BETA_FLOOR), bits)?,
                        _ => QuantizerParams::asymmetric(alpha, T::zero(), bits)?,
                    }
                }
            };
            model.blocks[bi].quant[site.index()] = Some(q);
        }
    }
    Ok(())
}

/// Switches a fully quantized model to spike-driven inference: `T = 2^b − 1`
/// and each spiking site fires at `θ = α` with decode scale `α`, offset `β`.
pub fn convert<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    if model.mode != Mode::Ann {
        return Err(Error::Mode {
            expected: "ann",
            found: model.mode.name(),
        });
    }
    let missing = model.unquantized_sites();
    if !missing.is_empty() {
        return Err(Error::UnquantizedSite(missing.join(", ")));
    }
    let mut out = model.clone();
    for b in &mut out.blocks {
        for site in Site::ALL {
            let q = b.quant[site.index()].unwrap();
            if q.bits != model.config.bits {
                return Err(Error::Config(format!(
                    "site {} quantized at {} bits, model uses {}",
                    site.name(),
                    q.bits,
                    model.config.bits
                )));
            }
            b.spikes[site.index()] = if site.spiking() {
                Some(SpikeSiteConfig::from_quantizer(&q)?)
            } else {
                None
            };
        }
    }
    out.mode = Mode::Snn;
    Ok(out)
}

/// Applies `θ' = T·θ`, `W' = T·W` to the scan-state sites of a converted model.
pub fn apply_threshold_scaling<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    if model.mode != Mode::Snn {
        return Err(Error::Mode {
            expected: "snn",
            found: model.mode.name(),
        });
    }
    let t = window_for_bits(model.config.bits);
    let mut out = model.clone();
    for b in &mut out.blocks {
        for site in Site::ALL.into_iter().filter(|s| s.scan_state()) {
            let sp = b.spikes[site.index()].ok_or_else(|| Error::UnquantizedSite(site.name().into()))?;
            b.spikes[site.index()] = Some(threshold_scale(&sp, t)?);
        }
    }
    Ok(out)
}

/// Initializes, calibrates and trains a quantized model on normalized windows.
pub fn fit<T: Scalar>(windows: &Windows<T>, config: ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome<Model<T>>> {
    fit_with(windows, config, tc, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<T: Scalar>(
    windows: &Windows<T>,
    mut config: ModelConfig,
    tc: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<Model<T>>> {
    tc.validate()?;
    config.bits = tc.bits;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::new(config, &mut rng)?;
    let k = windows.train.len().min(tc.calib_size);
    if k == 0 {
        return Err(Error::EmptyDataset("training split".into()));
    }
    let idx: Vec<usize> = (0..k).collect();
    calibrate(&mut model, &windows.train.gather(&idx).0)?;
    model.norm = Some(windows.norm.clone());
    train_with(model, &windows.train, &windows.val, tc, on_epoch)
}

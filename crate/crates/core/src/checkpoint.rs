//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPKY" | version: u32 | meta_len: u64 | meta: JSON | count: u64 | count × f32
//! ```
//!
//! The JSON block carries the configuration, mode, normalization statistics,
//! tensor names and shapes, and every quantizer and spike-site state. The
//! payload holds the weight tensors in declaration order. Parameters are
//! rounded to `f32` on save, so a loaded model equals
//! [`Model::snapped_to_f32`] of the saved one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::QuantizerParams;
use crate::scalar::Scalar;
use crate::spike::SpikeSiteConfig;
use crate::ssm::{BlockParams, Mode, Model, ModelConfig, Normalization, Site};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPKY";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SiteMeta {
    site: String,
    quant: Option<QuantizerParams<f64>>,
    spike: Option<SpikeSiteConfig<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    mode: Mode,
    norm: Option<Normalization>,
    sites: Vec<Vec<SiteMeta>>,
    tensors: Vec<TensorMeta>,
}

fn tensor_names(n_blocks: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..n_blocks)
        .flat_map(|b| crate::ssm::model::BLOCK_TENSORS.iter().map(move |n| format!("block{b}.{n}")))
        .collect();
    out.push("w_head".into());
    out.push("b_head".into());
    out
}

fn f64_quant<T: Scalar>(q: &QuantizerParams<T>) -> QuantizerParams<f64> {
    QuantizerParams {
        alpha: q.alpha.as_f64(),
        beta: q.beta.as_f64(),
        bits: q.bits,
        mode: q.mode,
    }
}

fn f64_spike<T: Scalar>(s: &SpikeSiteConfig<T>) -> SpikeSiteConfig<f64> {
    SpikeSiteConfig {
        t_steps: s.t_steps,
        theta: s.theta.as_f64(),
        scale: s.scale.as_f64(),
        offset: s.offset.as_f64(),
        gain: s.gain,
    }
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    model.validate()?;
    let m = model.snapped_to_f32();
    let weights = m.weight_tensors();
    let meta = Meta {
        config: m.config.clone(),
        mode: m.mode,
        norm: m.norm.clone(),
        sites: m
            .blocks
            .iter()
            .map(|b| {
                Site::ALL
                    .iter()
                    .map(|&s| SiteMeta {
                        site: s.name().to_string(),
                        quant: b.q(s).map(f64_quant),
                        spike: b.spike(s).map(f64_spike),
                    })
                    .collect()
            })
            .collect(),
        tensors: tensor_names(m.blocks.len())
            .into_iter()
            .zip(&weights)
            .map(|(name, t)| TensorMeta {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count: usize = weights.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(24 + json.len() + 4 * count);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for t in &weights {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }
}

fn cast_quant<T: Scalar>(q: &QuantizerParams<f64>) -> Result<QuantizerParams<T>> {
    QuantizerParams::new(T::lit(q.alpha), T::lit(q.beta), q.bits, q.mode)
}

fn cast_spike<T: Scalar>(s: &SpikeSiteConfig<f64>) -> SpikeSiteConfig<T> {
    SpikeSiteConfig {
        t_steps: s.t_steps,
        theta: T::lit(s.theta),
        scale: T::lit(s.scale),
        offset: T::lit(s.offset),
        gain: s.gain,
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = r.u64()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.config.validate()?;
    let cfg = meta.config;
    if meta.sites.len() != cfg.n_blocks {
        return Err(Error::Checkpoint(format!("{} site tables for {} blocks", meta.sites.len(), cfg.n_blocks)));
    }
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for table in &meta.sites {
        let mut b = BlockParams::<T>::zeros(&cfg);
        if table.len() != Site::ALL.len() {
            return Err(Error::Checkpoint(format!("{} sites in block table", table.len())));
        }
        for (site, sm) in Site::ALL.iter().zip(table) {
            if sm.site != site.name() {
                return Err(Error::Checkpoint(format!("site {} where {} expected", sm.site, site.name())));
            }
            b.quant[site.index()] = sm.quant.as_ref().map(cast_quant).transpose()?;
            b.spikes[site.index()] = sm.spike.as_ref().map(cast_spike);
        }
        blocks.push(b);
    }
    let mut model = Model {
        w_head: Tensor::zeros(&[cfg.history, cfg.horizon]),
        b_head: Tensor::zeros(&[cfg.horizon]),
        config: cfg,
        blocks,
        mode: meta.mode,
        norm: meta.norm,
    };
    let count = r.u64()?;
    let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload too large".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let names = tensor_names(model.blocks.len());
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut used = 0;
    let targets = model.weight_tensors_mut();
    if meta.tensors.len() != targets.len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, {} expected", meta.tensors.len(), targets.len())));
    }
    for ((t, tm), name) in targets.into_iter().zip(&meta.tensors).zip(&names) {
        if &tm.name != name || tm.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                tm.name,
                tm.shape,
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = T::lit(f64::from(values.next().ok_or_else(|| Error::Checkpoint("payload too short".into()))?));
            used += 1;
        }
    }
    if used != count {
        return Err(Error::Checkpoint(format!("payload holds {count} values, tensors need {used}")));
    }
    model.validate()?;
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}

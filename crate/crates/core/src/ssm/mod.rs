//! Spiking selective state-space block, forecasting head and reference SSM.

mod ann;
pub(crate) mod model;
pub mod reference;
pub mod scan;
mod snn;

pub use ann::{block_forward_ann, build_graph, AnnGraph, SiteInput};
pub use model::{BlockParams, Mode, Model, ModelConfig, Normalization, Site, DELTA_BETA_FLOOR};
pub use reference::{convolve, dense_ssm_reference, kernel_output, ssm_kernel};
pub use scan::{exponent, scan_backward, scan_forward, transition, ScanForward, ScanGrads, ScanInputs, ScanQuant, EXP_MIN};
pub use snn::{block_forward_snn, SnnTrace};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn head_dims<T: Scalar>(z: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (z.shape(), w.shape()) {
        ([b, l, c], [li, lo]) if l == li => Ok((*b, *l, *c, *lo)),
        _ => Err(Error::Shape {
            op: "forecast_head",
            lhs: z.shape().to_vec(),
            rhs: w.shape().to_vec(),
        }),
    }
}

/// Linear map over the time axis, shared by every channel:
/// `out[b, o, c] = Σ_l z[b, l, c] · W[l, o] + bias[o]`.
pub fn forecast_head<T: Scalar>(z: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (bsz, l_in, ch, l_out) = head_dims(z, w)?;
    if bias.shape() != [l_out] {
        return Err(Error::Shape {
            op: "forecast_head",
            lhs: w.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let (zd, wd) = (z.data(), w.data());
    let mut out = vec![T::zero(); bsz * l_out * ch];
    for b in 0..bsz {
        for o in 0..l_out {
            for c in 0..ch {
                let mut acc = bias[o];
                for l in 0..l_in {
                    acc += zd[(b * l_in + l) * ch + c] * wd[l * l_out + o];
                }
                out[(b * l_out + o) * ch + c] = acc;
            }
        }
    }
    Tensor::new(&[bsz, l_out, ch], out)
}

/// Gradients `(dz, dW, dbias)` of [`forecast_head`].
pub fn forecast_head_backward<T: Scalar>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (bsz, l_in, ch, l_out) = head_dims(z, w)?;
    if g.shape() != [bsz, l_out, ch] {
        return Err(Error::Shape {
            op: "forecast_head_backward",
            lhs: z.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let (zd, wd, gd) = (z.data(), w.data(), g.data());
    let mut gz = vec![T::zero(); zd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); l_out];
    for b in 0..bsz {
        for o in 0..l_out {
            for c in 0..ch {
                let go = gd[(b * l_out + o) * ch + c];
                gb[o] += go;
                for l in 0..l_in {
                    let zi = (b * l_in + l) * ch + c;
                    gz[zi] += go * wd[l * l_out + o];
                    gw[l * l_out + o] += go * zd[zi];
                }
            }
        }
    }
    Ok((
        Tensor::new(z.shape(), gz)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[l_out], gb)?,
    ))
}

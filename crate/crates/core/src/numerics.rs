//! Structural layers (linear, causal depthwise conv, RMSNorm) with their
//! vector-Jacobian products. The tape in [`crate::tape`] composes these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y[.., j] = Σ_i x[.., i] W[i, j] + b[j]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (d_in, d_out) = matrix_dims(w, "linear")?;
    if x.last_dim() != d_in || x.rank() == 0 {
        return Err(Error::Shape {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: b.shape().to_vec(),
                rhs: vec![d_out],
            });
        }
    }
    let rows = x.rows();
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * d_out);
    for row in x.data().chunks(d_in) {
        let start = out.len();
        match b {
            Some(b) => out.extend_from_slice(b.data()),
            None => out.resize(start + d_out, T::zero()),
        }
        let acc = &mut out[start..];
        for (i, &xi) in row.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (a, &wij) in acc.iter_mut().zip(wrow) {
                *a += xi * wij;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d_in, d_out) = matrix_dims(w, "linear_backward")?;
    if gy.last_dim() != d_out || gy.rows() != x.rows() {
        return Err(Error::Shape {
            op: "linear_backward",
            lhs: gy.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let wd = w.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); d_out];
    for ((xr, gr), gxr) in x
        .data()
        .chunks(d_in)
        .zip(gy.data().chunks(d_out))
        .zip(gx.chunks_mut(d_in))
    {
        for (b, &g) in gb.iter_mut().zip(gr) {
            *b += g;
        }
        for i in 0..d_in {
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            let mut s = T::zero();
            for (&wij, &g) in wrow.iter().zip(gr) {
                s += wij * g;
            }
            gxr[i] = s;
            let xi = xr[i];
            if xi != T::zero() {
                for (gwij, &g) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(gr) {
                    *gwij += xi * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::from_vec(gb),
    ))
}

fn matrix_dims<T: Scalar>(w: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match w.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (x.shape(), k.shape()) {
        ([b, l, d], [kd, kw]) if d == kd && *kw >= 1 => Ok((*b, *l, *d, *kw)),
        _ => Err(Error::Shape {
            op: "depthwise_conv1d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }),
    }
}

/// Causal depthwise convolution over the time axis of `[B, L, D]`.
///
/// `y[b,t,d] = Σ_j k[d,j] x[b, t-(K-1)+j, d]`, out-of-range taps read zero.
pub fn depthwise_conv1d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (bsz, len, dim, kw) = conv_dims(x, k)?;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..bsz {
        for t in 0..len {
            for d in 0..dim {
                let mut acc = T::zero();
                for j in 0..kw {
                    let src = t as isize - (kw as isize - 1) + j as isize;
                    if src >= 0 {
                        acc += kd[d * kw + j] * xd[(b * len + src as usize) * dim + d];
                    }
                }
                out[(b * len + t) * dim + d] = acc;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Gradients of [`depthwise_conv1d`]: `(dx, dk)`.
pub fn depthwise_conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bsz, len, dim, kw) = conv_dims(x, k)?;
    x.check_same(gy, "depthwise_conv1d_backward")?;
    let xd = x.data();
    let kd = k.data();
    let gd = gy.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    for b in 0..bsz {
        for t in 0..len {
            for d in 0..dim {
                let g = gd[(b * len + t) * dim + d];
                for j in 0..kw {
                    let src = t as isize - (kw as isize - 1) + j as isize;
                    if src >= 0 {
                        let xi = (b * len + src as usize) * dim + d;
                        gx[xi] += kd[d * kw + j] * g;
                        gk[d * kw + j] += xd[xi] * g;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(k.shape(), gk)?))
}

/// `y = x / sqrt(mean(x²) + eps) · g` over the last axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = check_norm(x, g, eps)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let inv = inv_rms(row, eps);
        out.extend(row.iter().zip(g.data()).map(|(&v, &gi)| v * inv * gi));
    }
    Tensor::new(x.shape(), out)
}

/// Gradients of [`rmsnorm`]: `(dx, dg)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = check_norm(x, g, eps)?;
    x.check_same(gy, "rmsnorm_backward")?;
    let dn = T::from_usize(d).unwrap();
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![T::zero(); d];
    for (row, grow) in x.data().chunks(d).zip(gy.data().chunks(d)) {
        let inv = inv_rms(row, eps);
        // u_i = g_i * gy_i; dx_i = inv * u_i - inv^3 / D * x_i * Σ u_j x_j
        let mut dot = T::zero();
        for i in 0..d {
            dot += g[i] * grow[i] * row[i];
            gg[i] += grow[i] * row[i] * inv;
        }
        let c = inv * inv * inv * dot / dn;
        gx.extend((0..d).map(|i| inv * g[i] * grow[i] - c * row[i]));
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::from_vec(gg)))
}

fn check_norm<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<usize> {
    let d = x.last_dim();
    if g.shape() != [d] || d == 0 {
        return Err(Error::Shape {
            op: "rmsnorm",
            lhs: x.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!("rmsnorm eps must be > 0, got {eps}")));
    }
    Ok(d)
}

fn inv_rms<T: Scalar>(row: &[T], eps: T) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(row.len()).unwrap();
    T::one() / (ms + eps).sqrt()
}

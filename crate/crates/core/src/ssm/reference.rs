//! Dense linear time-invariant state-space reference and its convolution kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims2<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape {
            op: "dense_ssm",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = dims2(a).unwrap();
    let (_, n) = dims2(b).unwrap();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn matvec<T: Scalar>(a: &Tensor<T>, x: &[T]) -> Vec<T> {
    let (m, k) = dims2(a).unwrap();
    (0..m).map(|i| (0..k).map(|p| a[i * k + p] * x[p]).sum()).collect()
}

fn check_system<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (s, s2) = dims2(a)?;
    let (sb, m) = dims2(b)?;
    let (p, sc) = dims2(c)?;
    if s != s2 || sb != s || sc != s {
        return Err(Error::Shape {
            op: "dense_ssm",
            lhs: a.shape().to_vec(),
            rhs: [b.shape(), c.shape()].concat(),
        });
    }
    Ok((s, m, p))
}

/// `x_{n+1} = A x_n + B u_n`, `y_n = C x_n + D u_n`, `x_0 = 0`, for `u: [L, m]`.
pub fn dense_ssm_reference<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (s, m, p) = check_system(a, b, c)?;
    let (len, um) = dims2(u)?;
    if um != m || d.shape() != [p, m] {
        return Err(Error::Shape {
            op: "dense_ssm",
            lhs: d.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let mut x = vec![T::zero(); s];
    let mut y = Vec::with_capacity(len * p);
    for n in 0..len {
        let un = &u.data()[n * m..(n + 1) * m];
        let cx = matvec(c, &x);
        let du = matvec(d, un);
        y.extend(cx.iter().zip(&du).map(|(&a, &b)| a + b));
        let ax = matvec(a, &x);
        let bu = matvec(b, un);
        x = ax.iter().zip(&bu).map(|(&a, &b)| a + b).collect();
    }
    Tensor::new(&[len, p], y)
}

/// `K_k = C A^k B` for `k = 0..len`, each `[p, m]`.
pub fn ssm_kernel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, len: usize) -> Result<Vec<Tensor<T>>> {
    check_system(a, b, c)?;
    let mut out = Vec::with_capacity(len);
    let mut ak_b = b.clone();
    for _ in 0..len {
        out.push(matmul(c, &ak_b));
        ak_b = matmul(a, &ak_b);
    }
    Ok(out)
}

/// `y_n = Σ_{k=0}^{n} K_k u_{n−k}` for `u: [L, m]`.
pub fn convolve<T: Scalar>(kernel: &[Tensor<T>], u: &Tensor<T>) -> Result<Tensor<T>> {
    let (len, m) = dims2(u)?;
    let p = match kernel.first() {
        Some(k) => dims2(k)?.0,
        None => return Tensor::new(&[len, 0], vec![]),
    };
    if kernel.len() < len || kernel.iter().any(|k| k.shape() != [p, m]) {
        return Err(Error::Shape {
            op: "convolve",
            lhs: kernel[0].shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let mut y = vec![T::zero(); len * p];
    for n in 0..len {
        for (k, kk) in kernel.iter().enumerate().take(n + 1) {
            let v = matvec(kk, &u.data()[(n - k) * m..(n - k + 1) * m]);
            for (yo, vi) in y[n * p..(n + 1) * p].iter_mut().zip(v) {
                *yo += vi;
            }
        }
    }
    Tensor::new(&[len, p], y)
}

/// Output of the dense system written in kernel form.
///
/// The state update feeds `u_n` into `x_{n+1}`, so the kernel acts on the
/// input delayed by one step while `D` acts on the current input.
pub fn kernel_output<T: Scalar>(kernel: &[Tensor<T>], d: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (len, m) = dims2(u)?;
    let mut delayed = vec![T::zero(); len * m];
    if len > 1 {
        delayed[m..].copy_from_slice(&u.data()[..(len - 1) * m]);
    }
    let conv = convolve(kernel, &Tensor::new(&[len, m], delayed)?)?;
    let p = conv.last_dim();
    let mut y = conv.into_data();
    for n in 0..len {
        let du = matvec(d, &u.data()[n * m..(n + 1) * m]);
        for (yo, v) in y[n * p..(n + 1) * p].iter_mut().zip(du) {
            *yo += v;
        }
    }
    Tensor::new(&[len, p], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::Rounding;
    use crate::ssm::scan::{exponent, scan_forward, ScanInputs, ScanQuant};
    use crate::test_util::rand_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stable(rng: &mut ChaCha8Rng, s: usize) -> Tensor<f64> {
        let a = rand_tensor(rng, &[s, s]);
        let norm: f64 = a.data().iter().map(|v| v.abs()).sum::<f64>();
        a.scale(0.9 / norm.max(1.0))
    }

    #[test]
    fn memoryless_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, c, d) = (rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[1, 3]), rand_tensor(&mut rng, &[1, 2]));
        let u = rand_tensor(&mut rng, &[6, 2]);
        let y = dense_ssm_reference(&Tensor::zeros(&[3, 3]), &b, &c, &d, &u).unwrap();
        let cb = matmul(&c, &b);
        for n in 0..6 {
            let mut want = matvec(&d, &u.data()[n * 2..n * 2 + 2])[0];
            if n >= 1 {
                want += matvec(&cb, &u.data()[(n - 1) * 2..n * 2])[0];
            }
            assert!((y[n] - want).abs() < 1e-14);
        }
        let zero = dense_ssm_reference(&stable(&mut rng, 3), &b, &c, &d, &Tensor::zeros(&[5, 2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, c) = (rand_tensor(&mut rng, &[2, 1]), rand_tensor(&mut rng, &[1, 2]));
        let mut eye = Tensor::zeros(&[2, 2]);
        eye[0] = 1.0;
        eye[3] = 1.0;
        let k = ssm_kernel(&eye, &b, &c, 5).unwrap();
        let cb = matmul(&c, &b);
        assert!(k.iter().all(|kk| kk == &cb));
        let k2 = ssm_kernel(&stable(&mut rng, 2), &b, &c, 3).unwrap();
        assert_eq!(k2[0], cb);
    }

    #[test]
    fn recurrence_equals_kernel_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = stable(&mut rng, 2);
        let (b, c, d) = (rand_tensor(&mut rng, &[2, 1]), rand_tensor(&mut rng, &[1, 2]), rand_tensor(&mut rng, &[1, 1]));
        let u = rand_tensor(&mut rng, &[8, 1]);
        let rec = dense_ssm_reference(&a, &b, &c, &d, &u).unwrap();
        let k = ssm_kernel(&a, &b, &c, 8).unwrap();
        let conv = kernel_output(&k, &d, &u).unwrap();
        assert!(rec.max_abs_diff(&conv).unwrap() <= 1e-10);
    }

    /// With constant Δ, B, C and no quantization the selective scan is a
    /// time-invariant diagonal system whose kernel acts on the current input.
    #[test]
    fn constant_step_scan_is_a_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (len, n) = (rng.random_range(1..20), rng.random_range(1..5));
            let dt: f64 = rng.random_range(0.05..3.0);
            let a_log = rand_tensor(&mut rng, &[1, n]);
            let bv = rand_tensor(&mut rng, &[n]);
            let cv = rand_tensor(&mut rng, &[n]);
            let dk: f64 = rng.random_range(-1.0..1.0);
            let s = rand_tensor(&mut rng, &[1, len, 1]);
            let tile = |v: &Tensor<f64>| Tensor::new(&[1, len, n], (0..len).flat_map(|_| v.data().to_vec()).collect()).unwrap();
            let (bt, ct) = (tile(&bv), tile(&cv));
            let delta = Tensor::full(&[1, len, 1], dt);
            let dsk = Tensor::from_vec(vec![dk]);
            let inputs = ScanInputs { delta: &delta, b: &bt, c: &ct, s: &s, a_log: &a_log, d_skip: &dsk };
            let y = scan_forward(&inputs, &ScanQuant::default(), Rounding::Nearest).unwrap().y;

            let mut ad = Tensor::zeros(&[n, n]);
            for i in 0..n {
                ad[i * n + i] = 2f64.powi(exponent(dt * -a_log[i].exp()));
            }
            let bd = Tensor::new(&[n, 1], bv.data().iter().map(|&b| dt * b).collect()).unwrap();
            let cd = Tensor::new(&[1, n], cv.data().to_vec()).unwrap();
            let k = ssm_kernel(&ad, &bd, &cd, len).unwrap();
            let u = s.clone().reshape(&[len, 1]).unwrap();
            let mut conv = convolve(&k, &u).unwrap();
            for t in 0..len {
                conv[t] += dk * u[t];
            }
            assert!(conv.max_abs_diff(&y.reshape(&[len, 1]).unwrap()).unwrap() <= 1e-8);
        }
    }
}

//! Forecast accuracy metrics, computed globally over every element.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(Σ(y − ŷ)², Σ(y − ȳ)²)` over all elements.
fn sums<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<(f64, f64)> {
    y.check_same(y_hat, "metrics")?;
    if y.is_empty() {
        return Err(Error::EmptyDataset("no targets to score".into()));
    }
    let n = y.len() as f64;
    let mean = y.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        sse += (a - b) * (a - b);
        sst += (a - mean) * (a - mean);
    }
    if sst == 0.0 {
        return Err(Error::InvalidArgument("targets are constant; R² is undefined".into()));
    }
    Ok((sse, sst))
}

/// Coefficient of determination `1 − SSE/SST`.
pub fn r2<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    let (sse, sst) = sums(y, y_hat)?;
    Ok(1.0 - sse / sst)
}

/// Root relative squared error `√(SSE/SST)`.
pub fn rrse<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    let (sse, sst) = sums(y, y_hat)?;
    Ok((sse / sst).sqrt())
}

/// Mean squared error.
pub fn mse<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    y.check_same(y_hat, "mse")?;
    if y.is_empty() {
        return Err(Error::EmptyDataset("no targets to score".into()));
    }
    let s: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / y.len() as f64)
}

/// Slice `[n, horizon, vars]` at one horizon step.
pub fn horizon_slice<T: Scalar>(y: &Tensor<T>, step: usize) -> Result<Tensor<T>> {
    let s = y.shape();
    if s.len() != 3 || step >= s[1] {
        return Err(Error::InvalidArgument(format!("horizon step {step} out of range for {s:?}")));
    }
    let (g, v) = (s[1], s[2]);
    let mut out = Vec::with_capacity(s[0] * v);
    for i in 0..s[0] {
        let off = (i * g + step) * v;
        out.extend_from_slice(&y.data()[off..off + v]);
    }
    Tensor::new(&[s[0], v], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn hand_values() {
        let y = t(&[0.0, 1.0, 2.0]);
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(rrse(&y, &y).unwrap(), 0.0);
        let flat = t(&[1.0, 1.0, 1.0]);
        assert_eq!(r2(&y, &flat).unwrap(), 0.0);
        assert_eq!(rrse(&y, &flat).unwrap(), 1.0);
        let p = t(&[0.0, 1.0, 1.0]);
        assert!((r2(&y, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!((rrse(&y, &p).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(r2(&flat, &y).is_err());
    }

    #[test]
    fn rrse_squared_complements_r2() {
        let y = t(&[0.3, -1.2, 2.5, 0.9, -0.4]);
        let p = t(&[0.1, -1.0, 2.0, 1.3, 0.2]);
        let (a, b) = (r2(&y, &p).unwrap(), rrse(&y, &p).unwrap());
        assert!((b * b + a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slices_horizon() {
        let y = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(horizon_slice(&y, 1).unwrap().data(), [2.0, 4.0]);
        assert!(horizon_slice(&y, 2).is_err());
    }
}

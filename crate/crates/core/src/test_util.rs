use crate::tensor::Tensor;
use rand::Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a scalar function with respect to every entry of `x`.
pub fn finite_diff(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn assert_grad_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, rel: f64) {
    assert_eq!(analytic.shape(), numeric.shape());
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let tol = rel * a.abs().max(n.abs()) + 1e-8;
        assert!((a - n).abs() <= tol, "entry {i}: analytic {a} vs numeric {n}");
    }
}

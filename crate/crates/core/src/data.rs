//! Series ingestion, chronological windowing and z-score normalization.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::Normalization;
use crate::tensor::Tensor;

/// Multivariate series: rows are time steps, columns are variables.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub values: Tensor<f64>,
    pub names: Vec<String>,
    pub sample_rate: Option<String>,
}

impl SeriesDataset {
    pub fn new(values: Tensor<f64>, names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || names.len() != values.shape()[1] {
            return Err(Error::Shape {
                op: "dataset",
                lhs: values.shape().to_vec(),
                rhs: vec![0, names.len()],
            });
        }
        Ok(Self {
            values,
            names,
            sample_rate: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_vars();
        &self.values.data()[t * n..(t + 1) * n]
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Parses CSV text. Cell errors report the 1-based file line and column.
pub fn parse_csv(text: &str, has_header: bool, label: &str) -> Result<SeriesDataset> {
    let fmt_err = |message: String| Error::CsvFormat {
        path: label.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Option<Vec<String>> = if has_header {
        let h = rdr.headers().map_err(|e| fmt_err(e.to_string()))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut data = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(fmt_err(format!("line {line}: expected {w} columns, found {}", rec.len())));
            }
            _ => {}
        }
        for (j, cell) in rec.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(Error::Csv {
                        path: label.to_string(),
                        row: line,
                        col: j + 1,
                        cell: cell.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    let n = width.unwrap_or(0);
    if rows == 0 || n == 0 {
        return Err(Error::EmptyDataset(format!("{label} has no data rows")));
    }
    let names = header.unwrap_or_else(|| default_names(n));
    SeriesDataset::new(Tensor::new(&[rows, n], data)?, names)
}

pub fn load_csv(path: &Path, has_header: bool) -> Result<SeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, has_header, &path.display().to_string())
}

/// Chronological train/validation/test proportions of the window count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub const KEYS: [&'static str; 3] = ["train_ratio", "val_ratio", "test_ratio"];

    /// Overrides ratios with any `*_ratio` keys present.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, slot) in Self::KEYS.iter().zip([&mut self.train, &mut self.val, &mut self.test]) {
            if let Some(v) = kv.get_f64(key)? {
                *slot = v;
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || r.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} must be >= 0 and sum to at most 1")));
        }
        Ok(())
    }
}

/// Number of stride-1 `(history, horizon)` windows in `rows` time steps.
pub fn window_count(rows: usize, history: usize, horizon: usize) -> Result<usize> {
    if history == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("history and horizon must be >= 1".into()));
    }
    if history + horizon > rows {
        return Err(Error::InvalidArgument(format!(
            "history {history} + horizon {horizon} exceeds {rows} rows"
        )));
    }
    Ok(rows - history - horizon + 1)
}

/// `floor(ratio · count)` for each split.
pub fn split_counts(count: usize, r: &SplitRatios) -> [usize; 3] {
    [r.train, r.val, r.test].map(|v| (v * count as f64 + 1e-9).floor() as usize)
}

/// Consecutive window-index ranges of the train, validation and test splits.
pub fn split_ranges(count: usize, r: &SplitRatios) -> [Range<usize>; 3] {
    let [a, b, c] = split_counts(count, r);
    [0..a, a..a + b, a + b..a + b + c]
}

/// Input/target pairs stacked as `x: [n, history, vars]`, `y: [n, horizon, vars]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    /// First row of each window's history in the source series.
    pub starts: Vec<usize>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn history(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }

    fn pick(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
        let s = t.shape();
        let stride = s[1] * s[2];
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        Tensor::new(&[idx.len(), s[1], s[2]], out).unwrap()
    }

    /// Stacks the selected windows.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        (Self::pick(&self.x, idx), Self::pick(&self.y, idx))
    }

    pub fn cast<U: Scalar>(&self) -> WindowSet<U> {
        WindowSet {
            x: self.x.cast(),
            y: self.y.cast(),
            starts: self.starts.clone(),
        }
    }
}

/// Windows starting at each row in `starts`, cut from `values: [rows, vars]`.
pub fn windows_at<T: Scalar>(values: &Tensor<f64>, history: usize, horizon: usize, starts: Range<usize>) -> WindowSet<T> {
    let n = values.shape()[1];
    let d = values.data();
    let mut x = Vec::with_capacity(starts.len() * history * n);
    let mut y = Vec::with_capacity(starts.len() * horizon * n);
    for s in starts.clone() {
        x.extend(d[s * n..(s + history) * n].iter().map(|&v| T::lit(v)));
        y.extend(d[(s + history) * n..(s + history + horizon) * n].iter().map(|&v| T::lit(v)));
    }
    let k = starts.len();
    WindowSet {
        x: Tensor::new(&[k, history, n], x).unwrap(),
        y: Tensor::new(&[k, horizon, n], y).unwrap(),
        starts: starts.collect(),
    }
}

/// Per-variable mean and population standard deviation over `rows`.
/// Constant columns get unit scale.
pub fn fit_normalization(values: &Tensor<f64>, rows: Range<usize>) -> Result<Normalization> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no rows to fit normalization on".into()));
    }
    let n = values.shape()[1];
    let k = rows.len() as f64;
    let d = values.data();
    let mut mean = vec![0.0; n];
    for t in rows.clone() {
        for c in 0..n {
            mean[c] += d[t * n + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0; n];
    for t in rows {
        for c in 0..n {
            let e = d[t * n + c] - mean[c];
            var[c] += e * e;
        }
    }
    let std = var.iter().map(|v| (v / k).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    Ok(Normalization { mean, std })
}

/// Normalized chronological splits of one dataset.
#[derive(Clone, Debug)]
pub struct Windows<T> {
    pub train: WindowSet<T>,
    pub val: WindowSet<T>,
    pub test: WindowSet<T>,
    pub norm: Normalization,
}

/// Slides stride-1 windows over the series and assigns them to splits in
/// time order. Statistics come from the rows the training windows cover.
pub fn make_windows<T: Scalar>(ds: &SeriesDataset, history: usize, horizon: usize, ratios: &SplitRatios) -> Result<Windows<T>> {
    ratios.validate()?;
    let w = window_count(ds.rows(), history, horizon)?;
    let [tr, va, te] = split_ranges(w, ratios);
    if tr.is_empty() {
        return Err(Error::EmptyDataset(format!("training split of {w} windows is empty")));
    }
    let norm = fit_normalization(&ds.values, 0..tr.end + history + horizon - 1)?;
    let z = norm.apply(&ds.values);
    Ok(Windows {
        train: windows_at(&z, history, horizon, tr),
        val: windows_at(&z, history, horizon, va),
        test: windows_at(&z, history, horizon, te),
        norm,
    })
}

/// Every window of the series, normalized with the given statistics.
pub fn all_windows<T: Scalar>(ds: &SeriesDataset, history: usize, horizon: usize, norm: &Normalization) -> Result<WindowSet<T>> {
    if norm.mean.len() != ds.n_vars() {
        return Err(Error::Shape {
            op: "normalization",
            lhs: vec![norm.mean.len()],
            rhs: vec![ds.n_vars()],
        });
    }
    let w = window_count(ds.rows(), history, horizon)?;
    Ok(windows_at(&norm.apply(&ds.values), history, horizon, 0..w))
}

/// Two coupled noisy sinusoids: `a` oscillates with period 24, `b` mixes
/// a period-40 wave with `a` delayed by three steps.
pub fn coupled_sinusoids(steps: usize, noise: f64, seed: u64) -> SeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise.max(0.0)).unwrap();
    let tau = std::f64::consts::TAU;
    let mut a = Vec::with_capacity(steps);
    let mut data = Vec::with_capacity(steps * 2);
    for t in 0..steps {
        let tf = t as f64;
        let av = (tau * tf / 24.0).sin() + eps.sample(&mut rng);
        let lag = if t >= 3 { a[t - 3] } else { 0.0 };
        let bv = 0.6 * (tau * tf / 40.0).sin() + 0.4 * lag + eps.sample(&mut rng);
        a.push(av);
        data.push(av);
        data.push(bv);
    }
    SeriesDataset::new(Tensor::new(&[steps, 2], data).unwrap(), vec!["a".into(), "b".into()]).unwrap()
}

//! Loss models with exact gradients.
//!
//! [`LogisticRegression`] is the experimental model: mean softmax
//! cross-entropy with an appended bias feature, `d = (p + 1) * C`.
//! [`Quadratic`] is the data-free theory substrate
//! `F(w) = (λ/2)‖w − w*‖²`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{check_len, ParamVector};

/// Rows of a dataset that one loss evaluation averages over.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub data: Option<&'a Dataset>,
    pub rows: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a Dataset, rows: &'a [usize]) -> Self {
        Self {
            data: Some(data),
            rows,
        }
    }

    /// Batch for models that ignore data.
    pub fn none() -> Batch<'static> {
        Batch {
            data: None,
            rows: &[],
        }
    }
}

pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;

    fn loss(&self, w: &[f64], batch: &Batch<'_>) -> Result<f64>;

    fn grad(&self, w: &[f64], batch: &Batch<'_>) -> Result<ParamVector>;

    /// Classification accuracy on a whole dataset, when the model classifies.
    fn accuracy(&self, _w: &[f64], _data: &Dataset) -> Option<f64> {
        None
    }
}

/// Multinomial logistic regression.
///
/// Parameters are laid out feature-major: entry `j * C + c` weights feature
/// `j` for class `c`, and the last `C` entries are the class biases.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    features: usize,
    classes: usize,
}

impl LogisticRegression {
    pub fn new(features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "logistic regression needs p >= 1 and C >= 2, got p={features}, C={classes}"
            )));
        }
        Ok(Self { features, classes })
    }

    /// 784 pixels, 10 digits.
    pub fn mnist() -> Self {
        Self {
            features: 784,
            classes: 10,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check<'a>(&self, w: &[f64], batch: &Batch<'a>) -> Result<&'a Dataset> {
        check_len(self.dim(), w.len())?;
        let data = batch
            .data
            .ok_or(Error::Empty("logistic regression batch has no dataset"))?;
        if batch.rows.is_empty() {
            return Err(Error::Empty("logistic regression batch"));
        }
        if data.features() != self.features {
            return Err(Error::Shape(format!(
                "model expects {} features, dataset has {}",
                self.features,
                data.features()
            )));
        }
        for &r in batch.rows {
            if r >= data.len() {
                return Err(Error::Shape(format!(
                    "row {r} out of range for {} rows",
                    data.len()
                )));
            }
            let y = data.label(r);
            if y as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.classes,
                });
            }
        }
        Ok(data)
    }

    /// Logits for row `r`. Only non-zero features are visited, which on
    /// MNIST removes about four fifths of the work; the accumulation order
    /// is the same as a dense sweep that skips zeros.
    fn logits(&self, w: &[f64], data: &Dataset, r: usize, out: &mut [f64]) {
        let c = self.classes;
        out.copy_from_slice(&w[self.features * c..]);
        let x = data.row(r);
        let nz = data.nonzero(r);
        if c == 10 {
            let acc: &mut [f64; 10] = out.try_into().expect("ten classes");
            accumulate(acc, w, x, nz);
        } else {
            for &j in nz {
                let j = j as usize;
                let xj = x[j];
                for (o, wr) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                    *o += xj * wr;
                }
            }
        }
    }
}

/// Fixed-width inner loop so the compiler can keep the logits in registers.
fn accumulate<const C: usize>(acc: &mut [f64; C], w: &[f64], x: &[f64], nz: &[u32]) {
    for &j in nz {
        let j = j as usize;
        let xj = x[j];
        let row: &[f64; C] = w[j * C..(j + 1) * C].try_into().expect("row width");
        for k in 0..C {
            acc[k] += xj * row[k];
        }
    }
}

/// `(max, ln Σ exp(l - max))`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + s.ln()
}

impl LossModel for LogisticRegression {
    fn dim(&self) -> usize {
        (self.features + 1) * self.classes
    }

    fn loss(&self, w: &[f64], batch: &Batch<'_>) -> Result<f64> {
        let data = self.check(w, batch)?;
        let mut logits = vec![0.0; self.classes];
        let mut total = 0.0;
        for &r in batch.rows {
            self.logits(w, data, r, &mut logits);
            total += log_sum_exp(&logits) - logits[data.label(r) as usize];
        }
        let loss = total / batch.rows.len() as f64;
        if !loss.is_finite() {
            return Err(Error::non_finite("logistic regression loss"));
        }
        Ok(loss)
    }

    fn grad(&self, w: &[f64], batch: &Batch<'_>) -> Result<ParamVector> {
        let data = self.check(w, batch)?;
        let c = self.classes;
        let inv_n = 1.0 / batch.rows.len() as f64;
        let mut g = vec![0.0; self.dim()];
        let mut logits = vec![0.0; c];
        for &r in batch.rows {
            let x = data.row(r);
            self.logits(w, data, r, &mut logits);
            let lse = log_sum_exp(&logits);
            // Residual p_c − 1[c = y], already divided by the batch size.
            for (k, l) in logits.iter_mut().enumerate() {
                let y = if k == data.label(r) as usize { 1.0 } else { 0.0 };
                *l = ((*l - lse).exp() - y) * inv_n;
            }
            for &j in data.nonzero(r) {
                let j = j as usize;
                let xj = x[j];
                for (gj, res) in g[j * c..(j + 1) * c].iter_mut().zip(&logits) {
                    *gj += xj * res;
                }
            }
            for (gb, res) in g[self.features * c..].iter_mut().zip(&logits) {
                *gb += res;
            }
        }
        ParamVector::new(g)
    }

    fn accuracy(&self, w: &[f64], data: &Dataset) -> Option<f64> {
        if data.is_empty() || data.features() != self.features || w.len() != self.dim() {
            return None;
        }
        let mut logits = vec![0.0; self.classes];
        let correct = (0..data.len())
            .filter(|&r| {
                self.logits(w, data, r, &mut logits);
                argmax(&logits) == data.label(r) as usize
            })
            .count();
        Some(correct as f64 / data.len() as f64)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `F(w) = (λ/2)‖w − w*‖²`, identical for every sample.
#[derive(Debug, Clone)]
pub struct Quadratic {
    lambda: f64,
    optimum: ParamVector,
}

impl Quadratic {
    pub fn new(lambda: f64, optimum: ParamVector) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "curvature must be positive, got {lambda}"
            )));
        }
        Ok(Self { lambda, optimum })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn optimum(&self) -> &ParamVector {
        &self.optimum
    }

    pub fn distance(&self, w: &[f64]) -> f64 {
        let diff: Vec<f64> = w.iter().zip(self.optimum.iter()).map(|(a, b)| a - b).collect();
        crate::params::norm(&diff)
    }

    pub fn eval(&self, w: &[f64]) -> Result<f64> {
        check_len(self.optimum.dim(), w.len())?;
        let s: f64 = w
            .iter()
            .zip(self.optimum.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = 0.5 * self.lambda * s;
        if !v.is_finite() {
            return Err(Error::non_finite("quadratic loss"));
        }
        Ok(v)
    }

    pub fn gradient(&self, w: &[f64]) -> Result<ParamVector> {
        check_len(self.optimum.dim(), w.len())?;
        ParamVector::new(
            w.iter()
                .zip(self.optimum.iter())
                .map(|(a, b)| self.lambda * (a - b))
                .collect(),
        )
    }
}

impl LossModel for Quadratic {
    fn dim(&self) -> usize {
        self.optimum.dim()
    }

    fn loss(&self, w: &[f64], _batch: &Batch<'_>) -> Result<f64> {
        self.eval(w)
    }

    fn grad(&self, w: &[f64], _batch: &Batch<'_>) -> Result<ParamVector> {
        self.gradient(w)
    }
}

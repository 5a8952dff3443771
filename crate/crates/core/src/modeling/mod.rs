//! Models with closed-form per-sample gradients, and the datasets they train on.
//!
//! Parameters are a flat vector. Every model appends a bias input, so a
//! sample `x ∈ ℝᵖ` is used as `x̂ = (x, 1)`. Softmax parameters are stored as
//! one `(p+1)`-block per class.

mod data;

pub use data::{
    gen_synthetic_classification, gen_synthetic_regression, load_csv, split, Schema, SplitSpec, Standardizer,
    SyntheticSpec, TargetScaling, write_csv,
};
pub(crate) use data::resolve;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticBinary,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Class(v) => Targets::Class(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Feature rows with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n×p`, one row per sample.
    pub features: DMatrix<f64>,
    pub targets: Targets,
    /// Per-column mean/std applied to `features`, if standardized.
    pub standardization: Option<Standardizer>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: DMatrix<f64>, targets: Targets) -> Result<Self> {
        check_dim(features.nrows(), targets.len())?;
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite feature value {bad}")));
        }
        if let Targets::Real(t) = &targets {
            if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite target value {bad}")));
            }
        }
        Ok(Self { name: name.into(), features, targets, standardization: None })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = DMatrix::zeros(idx.len(), self.features.ncols());
        for (mut dst, src) in features.column_iter_mut().zip(self.features.column_iter()) {
            for (d, &i) in dst.iter_mut().zip(idx) {
                *d = src[i];
            }
        }
        Dataset {
            name: self.name.clone(),
            features,
            targets: self.targets.select(idx),
            standardization: self.standardization.clone(),
        }
    }

    /// Number of classes implied by the labels (0 for real targets).
    pub fn class_count(&self) -> usize {
        match &self.targets {
            Targets::Real(_) => 0,
            Targets::Class(c) => c.iter().max().map_or(0, |m| m + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self { kind: ModelKind::LinearRegression, input_dim, classes: 1 }
    }

    pub fn logistic(input_dim: usize) -> Self {
        Self { kind: ModelKind::LogisticBinary, input_dim, classes: 2 }
    }

    pub fn softmax(input_dim: usize, classes: usize) -> Self {
        Self { kind: ModelKind::Softmax, input_dim, classes }
    }

    pub fn new(kind: ModelKind, input_dim: usize, classes: usize) -> Result<Self> {
        match kind {
            ModelKind::LinearRegression => Ok(Self::linear(input_dim)),
            ModelKind::LogisticBinary => Ok(Self::logistic(input_dim)),
            ModelKind::Softmax if classes >= 2 => Ok(Self::softmax(input_dim, classes)),
            ModelKind::Softmax => Err(Error::Config(format!("softmax needs at least 2 classes, got {classes}"))),
        }
    }

    /// `p+1` for linear and logistic models, `c·p + c` for softmax.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticBinary => self.input_dim + 1,
            ModelKind::Softmax => self.classes * self.input_dim + self.classes,
        }
    }

    pub fn is_regression(&self) -> bool {
        self.kind == ModelKind::LinearRegression
    }

    fn check(&self, params: &DVector<f64>, data: &Dataset) -> Result<()> {
        check_dim(self.param_count(), params.len())?;
        check_dim(self.input_dim, data.input_dim())?;
        match (&data.targets, self.kind) {
            (Targets::Real(_), ModelKind::LinearRegression) => Ok(()),
            (Targets::Class(c), ModelKind::LogisticBinary) if c.iter().all(|&y| y < 2) => Ok(()),
            (Targets::Class(c), ModelKind::Softmax) if c.iter().all(|&y| y < self.classes) => Ok(()),
            _ => Err(Error::InvalidParameter(format!(
                "targets of dataset `{}` do not fit a {:?} model with {} classes",
                data.name, self.kind, self.classes
            ))),
        }
    }

    /// `n×c` matrix of raw scores (`c = 1` for linear and logistic models).
    fn scores(&self, params: &DVector<f64>, features: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.input_dim;
        let blocks = if self.kind == ModelKind::Softmax { self.classes } else { 1 };
        let n = features.nrows();
        let mut scores = DMatrix::from_fn(n, blocks, |_, c| params[c * (p + 1) + p]);
        let x = features.as_slice();
        let out = scores.as_mut_slice();
        // one pass over the features, column by column
        for j in 0..p {
            let col = &x[j * n..(j + 1) * n];
            for c in 0..blocks {
                let w = params[c * (p + 1) + j];
                for (s, v) in out[c * n..(c + 1) * n].iter_mut().zip(col) {
                    *s += w * v;
                }
            }
        }
        scores
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-sample gradients as a `d×n` matrix, one column per sample of `batch`.
pub fn per_sample_gradient(model: &ModelSpec, params: &DVector<f64>, batch: &Dataset) -> Result<DMatrix<f64>> {
    model.check(params, batch)?;
    let n = batch.len();
    let p = model.input_dim;
    let scores = model.scores(params, &batch.features);
    // coefficient of x̂ᵢ in each (p+1)-block
    let (blocks, coeff) = match (&batch.targets, model.kind) {
        (Targets::Real(y), _) => (1, DMatrix::from_fn(n, 1, |i, _| scores[(i, 0)] - y[i])),
        (Targets::Class(y), ModelKind::LogisticBinary) => {
            (1, DMatrix::from_fn(n, 1, |i, _| sigmoid(scores[(i, 0)]) - y[i] as f64))
        }
        (Targets::Class(y), _) => {
            let c = model.classes;
            let mut probs = scores.transpose(); // c×n, columns contiguous
            for (i, mut col) in probs.column_iter_mut().enumerate() {
                softmax_row(col.as_mut_slice());
                col[y[i]] -= 1.0;
            }
            (c, probs.transpose())
        }
    };
    let mut grads = DMatrix::zeros(model.param_count(), n);
    for i in 0..n {
        let x = batch.features.row(i);
        let mut col = grads.column_mut(i);
        for b in 0..blocks {
            let k = coeff[(i, b)];
            let base = b * (p + 1);
            for j in 0..p {
                col[base + j] = k * x[j];
            }
            col[base + p] = k;
        }
    }
    Ok(grads)
}

/// Mean per-sample loss: `½(ŷ−y)²`, binary cross-entropy, or softmax cross-entropy.
pub fn mean_loss(model: &ModelSpec, params: &DVector<f64>, data: &Dataset) -> Result<f64> {
    model.check(params, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let scores = model.scores(params, &data.features);
    let total: f64 = match (&data.targets, model.kind) {
        (Targets::Real(y), _) => y.iter().enumerate().map(|(i, t)| 0.5 * (scores[(i, 0)] - t).powi(2)).sum(),
        (Targets::Class(y), ModelKind::LogisticBinary) => y
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let z = scores[(i, 0)];
                // log(1 + e^z) − t·z
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                softplus - t as f64 * z
            })
            .sum(),
        (Targets::Class(y), _) => y
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = scores.row(i);
                let max = row.max();
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum(),
    };
    Ok(total / data.len() as f64)
}

/// Test metric: mean squared error for regression, accuracy in percent otherwise.
pub fn metric(model: &ModelSpec, params: &DVector<f64>, data: &Dataset) -> Result<f64> {
    model.check(params, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let scores = model.scores(params, &data.features);
    let n = data.len() as f64;
    Ok(match (&data.targets, model.kind) {
        (Targets::Real(y), _) => y.iter().enumerate().map(|(i, t)| (scores[(i, 0)] - t).powi(2)).sum::<f64>() / n,
        (Targets::Class(y), ModelKind::LogisticBinary) => {
            let hits = y.iter().enumerate().filter(|(i, &t)| (scores[(*i, 0)] > 0.0) == (t == 1)).count();
            100.0 * hits as f64 / n
        }
        (Targets::Class(y), _) => {
            let hits = y.iter().enumerate().filter(|(i, &t)| scores.row(*i).transpose().imax() == t).count();
            100.0 * hits as f64 / n
        }
    })
}

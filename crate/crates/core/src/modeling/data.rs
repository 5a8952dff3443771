use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, ModelKind, Targets};
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

/// Gaussian features with one latent-factor block:
/// `x_j = ρ·z + √(1−ρ²)·ε_j` for `j < corr_block`, standard normal otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub corr_block: usize,
    pub rho: f64,
    /// Target noise std relative to the (unit) signal std.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn regression(seed: u64) -> Self {
        Self { samples: 20_000, features: 10, corr_block: 5, rho: 0.8, noise: 0.1, seed }
    }

    pub fn classification(seed: u64) -> Self {
        Self { samples: 20_000, features: 400, corr_block: 50, rho: 0.8, noise: 0.1, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.corr_block > self.features {
            return Err(Error::InvalidParameter(format!(
                "correlated block {} exceeds feature count {}",
                self.corr_block, self.features
            )));
        }
        if !(self.rho.abs() < 1.0) || !(self.noise >= 0.0) {
            return Err(Error::InvalidParameter(format!("need |rho| < 1 and noise >= 0, got {} and {}", self.rho, self.noise)));
        }
        Ok(())
    }

    fn draw_features(&self) -> DMatrix<f64> {
        let mut rng = derive(self.seed, 1, Stream::Data);
        let spread = (1.0 - self.rho * self.rho).sqrt();
        let mut x = DMatrix::zeros(self.samples, self.features);
        for i in 0..self.samples {
            let latent: f64 = rng.sample(StandardNormal);
            for j in 0..self.features {
                let own: f64 = rng.sample(StandardNormal);
                x[(i, j)] = if j < self.corr_block { self.rho * latent + spread * own } else { own };
            }
        }
        x
    }

    /// Coefficients scaled so that `Var(wᵀx) = 1` under the feature model.
    fn draw_coefficients(&self) -> DVector<f64> {
        let mut rng = derive(self.seed, 0, Stream::Data);
        let w = DVector::from_fn(self.features, |_, _| rng.sample::<f64, _>(StandardNormal));
        let block_sum: f64 = w.rows(0, self.corr_block).sum();
        let block_sq: f64 = w.rows(0, self.corr_block).norm_squared();
        let var = w.norm_squared() + self.rho * self.rho * (block_sum * block_sum - block_sq);
        w / var.sqrt()
    }

    /// Signal `wᵀx` plus Gaussian noise, one value per row.
    fn noisy_signal(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let w = self.draw_coefficients();
        let mut rng = derive(self.seed, 2, Stream::Data);
        let mut y = x * w;
        for v in y.iter_mut() {
            *v += self.noise * rng.sample::<f64, _>(StandardNormal);
        }
        y
    }
}

pub fn gen_synthetic_regression(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let x = spec.draw_features();
    let y = spec.noisy_signal(&x);
    Dataset::new("synthetic_regression", x, Targets::Real(y.iter().copied().collect()))
}

/// Binary labels `1[sigmoid(wᵀx + noise) > 0.5]`.
pub fn gen_synthetic_classification(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let x = spec.draw_features();
    let y = spec.noisy_signal(&x);
    let labels = y.iter().map(|&s| usize::from(1.0 / (1.0 + (-s).exp()) > 0.5)).collect();
    Dataset::new("synthetic_classification", x, Targets::Class(labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self { train: 0.8, val: 0.1, seed }
    }
}

/// Seeded shuffle into `floor(0.8n)` / `floor(0.1n)` / remainder.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let n = data.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!("need at least 10 samples to split, got {n}")));
    }
    if !(spec.train > 0.0 && spec.val >= 0.0 && spec.train + spec.val < 1.0) {
        return Err(Error::InvalidParameter(format!("bad split fractions {}/{}", spec.train, spec.val)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive(spec.seed, 0, Stream::Split));
    let n_train = (spec.train * n as f64).floor() as usize;
    let n_val = (spec.val * n as f64).floor() as usize;
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((data.subset(train), data.subset(val), data.subset(test)))
}

/// Per-column standardization fitted on one split and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    /// Population mean/std of each column; constant columns get std 1.
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len().max(1) as f64;
        let mean = data.features.row_mean().transpose();
        let std = DVector::from_fn(data.input_dim(), |j, _| {
            let m = mean[j];
            let var = data.features.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for (j, mut col) in out.features.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out.standardization = Some(self.clone());
        out
    }
}

/// Affine target rescaling fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetScaling {
    None,
    MinMax { min: f64, max: f64 },
}

impl TargetScaling {
    pub fn fit_min_max(data: &Dataset) -> Self {
        match &data.targets {
            Targets::Real(y) if !y.is_empty() => {
                let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                TargetScaling::MinMax { min, max }
            }
            _ => TargetScaling::None,
        }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        if let (TargetScaling::MinMax { min, max }, Targets::Real(y)) = (self, &mut out.targets) {
            let span = if max > min { max - min } else { 1.0 };
            y.iter_mut().for_each(|v| *v = (*v - min) / span);
        }
        out
    }
}

/// Key-value description of a CSV file.
///
/// ```text
/// # comment
/// target = progression      # column name, or index when header = false
/// task = regression         # regression | binary | multiclass
/// classes = 10              # multiclass only; inferred when absent
/// header = true
/// target_scaling = minmax   # minmax | none (regression)
/// encode.smoker = no:0, yes:1
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub target: String,
    pub task: ModelKind,
    pub classes: Option<usize>,
    pub header: bool,
    pub target_scaling: bool,
    pub encodings: HashMap<String, HashMap<String, f64>>,
}

impl Schema {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut target = None;
        let mut task = None;
        let mut classes = None;
        let mut header = true;
        let mut target_scaling = false;
        let mut encodings = HashMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: path.to_path_buf(), line: no + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "target" => target = Some(value.to_string()),
                "task" => {
                    task = Some(match value {
                        "regression" => ModelKind::LinearRegression,
                        "binary" => ModelKind::LogisticBinary,
                        "multiclass" => ModelKind::Softmax,
                        other => return Err(err(format!("unknown task `{other}`"))),
                    })
                }
                "classes" => classes = Some(value.parse().map_err(|_| err(format!("bad class count `{value}`")))?),
                "header" => header = value.parse().map_err(|_| err(format!("bad boolean `{value}`")))?,
                "target_scaling" => {
                    target_scaling = match value {
                        "minmax" => true,
                        "none" => false,
                        other => return Err(err(format!("unknown target scaling `{other}`"))),
                    }
                }
                k if k.starts_with("encode.") => {
                    let mut map = HashMap::new();
                    for pair in value.split(',') {
                        let (label, code) = pair
                            .split_once(':')
                            .ok_or_else(|| err(format!("expected `label:code`, got `{pair}`")))?;
                        let code: f64 = code.trim().parse().map_err(|_| err(format!("bad code in `{pair}`")))?;
                        map.insert(label.trim().to_string(), code);
                    }
                    encodings.insert(k["encode.".len()..].to_string(), map);
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| Error::Parse { path: path.to_path_buf(), line: 0, message: format!("missing `{what}`") };
        Ok(Self {
            target: target.ok_or_else(|| missing("target"))?,
            task: task.ok_or_else(|| missing("task"))?,
            classes,
            header,
            target_scaling,
            encodings,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Reads a comma-separated file described by `schema`. Values are validated
/// but not standardized; standardization is fitted later on the training split.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut rows = reader.records();
    let parse_err = |line: usize, e: csv::Error| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() };

    let names: Vec<String> = if schema.header {
        match rows.next() {
            Some(Ok(rec)) => rec.iter().map(|s| s.trim_start_matches('\u{feff}').to_string()).collect(),
            Some(Err(e)) => return Err(parse_err(1, e)),
            None => return Err(Error::Parse { path: path.to_path_buf(), line: 1, message: "empty file".into() }),
        }
    } else {
        Vec::new()
    };
    let first_line = usize::from(schema.header) + 1;

    let mut width = if names.is_empty() { None } else { Some(names.len()) };
    let mut records = Vec::new();
    for (offset, rec) in rows.enumerate() {
        let line = first_line + offset;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(Error::RowLength { path: path.to_path_buf(), line, expected, found: rec.len() });
        }
        records.push((line, rec));
    }
    let width = width.unwrap_or(0);
    let names: Vec<String> = if names.is_empty() { (0..width).map(|i| i.to_string()).collect() } else { names };
    let target_col = names
        .iter()
        .position(|n| *n == schema.target)
        .ok_or_else(|| Error::Parse { path: path.to_path_buf(), line: 1, message: format!("no target column `{}`", schema.target) })?;

    let n = records.len();
    let p = width - 1;
    let mut features = DMatrix::zeros(n, p);
    let mut raw_targets = Vec::with_capacity(n);
    for (i, (line, rec)) in records.iter().enumerate() {
        let mut j = 0;
        for (col, cell) in rec.iter().enumerate() {
            let value = numeric_cell(cell, &names[col], schema).ok_or_else(|| Error::NonNumeric {
                path: path.to_path_buf(),
                line: *line,
                column: names[col].clone(),
                value: cell.to_string(),
            })?;
            if col == target_col {
                raw_targets.push((*line, value));
            } else {
                features[(i, j)] = value;
                j += 1;
            }
        }
    }

    let label = |line: usize, v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Parse { path: path.to_path_buf(), line, message: format!("class label `{v}` is not a nonnegative integer") })
        }
    };
    let targets = match schema.task {
        ModelKind::LinearRegression => Targets::Real(raw_targets.iter().map(|&(_, v)| v).collect()),
        ModelKind::LogisticBinary | ModelKind::Softmax => {
            let labels = raw_targets.iter().map(|&(line, v)| label(line, v)).collect::<Result<Vec<_>>>()?;
            let limit = match schema.task {
                ModelKind::LogisticBinary => 2,
                _ => schema.classes.unwrap_or(usize::MAX),
            };
            if let Some(pos) = labels.iter().position(|&y| y >= limit) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: raw_targets[pos].0,
                    message: format!("label {} outside 0..{limit}", labels[pos]),
                });
            }
            Targets::Class(labels)
        }
    };
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    Dataset::new(name, features, targets)
}

fn numeric_cell(cell: &str, column: &str, schema: &Schema) -> Option<f64> {
    if let Some(map) = schema.encodings.get(column) {
        if let Some(&code) = map.get(cell) {
            return Some(code);
        }
    }
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes features then the target as `x0,…,x{p-1},target` with a header row.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() };
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..data.input_dim()).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    writer.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        row.push(match &data.targets {
            Targets::Real(y) => y[i].to_string(),
            Targets::Class(y) => y[i].to_string(),
        });
        writer.write_record(&row).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Resolves a path relative to a base directory unless already absolute.
pub(crate) fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

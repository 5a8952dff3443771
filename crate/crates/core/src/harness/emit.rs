//! CSV artifacts: per-seed metrics, per-cell summaries, ε curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{RunRecord, SweepResult};
use crate::accountant::EpsilonCurve;
use crate::error::{Error, Result};
use crate::privatizer::StrategyKind;

/// Mean and sample standard deviation (0 for fewer than two values).
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Across-seed statistics at one evaluation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss_mean: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub epsilon: f64,
}

/// Averages records over seeds, row by row. All records must share a plan.
pub fn curve(records: &[RunRecord]) -> Vec<CurvePoint> {
    let Some(first) = records.first() else { return Vec::new() };
    (0..first.rows.len())
        .map(|i| {
            let metrics: Vec<f64> = records.iter().map(|r| r.rows[i].metric).collect();
            let losses: Vec<f64> = records.iter().map(|r| r.rows[i].loss).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            CurvePoint {
                step: first.rows[i].step,
                loss_mean: mean_std(&losses).0,
                metric_mean,
                metric_std,
                epsilon: records.iter().map(|r| r.rows[i].epsilon).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Final-row statistics of one (strategy, budget) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub budget: Option<f64>,
    pub sigma: f64,
    pub learning_rate: f64,
    pub h2: f64,
    pub seeds: usize,
    pub step: u64,
    pub loss_mean: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub epsilon: f64,
}

pub const SUMMARY_HEADER: &str = "strategy,budget,sigma,learning_rate,h2,seeds,step,loss_mean,metric_mean,metric_std,epsilon";

impl SummaryRow {
    fn csv(&self) -> String {
        let budget = self.budget.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{budget},{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.sigma,
            self.learning_rate,
            self.h2,
            self.seeds,
            self.step,
            self.loss_mean,
            self.metric_mean,
            self.metric_std,
            self.epsilon
        )
    }
}

/// Summary of records sharing one plan; `None` when there are none.
pub fn summarize(records: &[RunRecord], budget: Option<f64>) -> Option<SummaryRow> {
    let last = curve(records).pop()?;
    let plan = &records[0].plan;
    Some(SummaryRow {
        strategy: plan.strategy.kind,
        budget,
        sigma: plan.strategy.sigma,
        learning_rate: plan.learning_rate,
        h2: plan.strategy.h2,
        seeds: records.len(),
        step: last.step,
        loss_mean: last.loss_mean,
        metric_mean: last.metric_mean,
        metric_std: last.metric_std,
        epsilon: last.epsilon,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("step,loss,metric,epsilon\n");
    for row in &record.rows {
        let _ = writeln!(out, "{},{},{},{}", row.step, row.loss, row.metric, row.epsilon);
    }
    out
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss_mean,metric_mean,metric_std,epsilon\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{}", p.step, p.loss_mean, p.metric_mean, p.metric_std, p.epsilon);
    }
    out
}

/// Writes `metrics_<seed>.csv`, `summary.csv`, `curve.csv` and
/// `epsilon_curve.csv` for records that share one plan. Returns the paths.
pub fn emit(records: &[RunRecord], budget: Option<f64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for record in records {
        let path = out_dir.join(format!("metrics_{}.csv", record.seed));
        write(&path, &metrics_csv(record))?;
        written.push(path);
    }

    let mut summary = format!("{SUMMARY_HEADER}\n");
    if let Some(row) = summarize(records, budget) {
        summary.push_str(&row.csv());
        summary.push('\n');
    }
    let path = out_dir.join("summary.csv");
    write(&path, &summary)?;
    written.push(path);

    let path = out_dir.join("curve.csv");
    write(&path, &curve_csv(&curve(records)))?;
    written.push(path);

    let eps = match records.first() {
        Some(r) => EpsilonCurve::for_steps(&r.plan.releases_per_step(), &r.plan.eval_steps, r.plan.delta)?,
        None => EpsilonCurve::default(),
    };
    let path = out_dir.join("epsilon_curve.csv");
    eps.save(&path)?;
    written.push(path);
    Ok(written)
}

fn cell_dir(strategy: StrategyKind, budget: Option<f64>) -> String {
    match budget {
        Some(b) => format!("{strategy}_eps{b}"),
        None => strategy.to_string(),
    }
}

/// Writes the sweep's `summary.csv` and `candidates.csv`, plus one
/// [`emit`] directory per cell holding the selected runs.
pub fn emit_sweep(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut candidates = String::from("strategy,budget,sigma,learning_rate,h2,val_mean,selected\n");
    for cell in &result.cells {
        if let Some(row) = summarize(&cell.records, cell.budget) {
            summary.push_str(&row.csv());
            summary.push('\n');
        }
        let budget = cell.budget.map(|b| b.to_string()).unwrap_or_default();
        for c in &cell.candidates {
            let val = c.val_mean.map(|v| v.to_string()).unwrap_or_else(|| "diverged".into());
            let _ = writeln!(
                candidates,
                "{},{budget},{},{},{},{val},{}",
                cell.strategy,
                cell.sigma,
                c.learning_rate,
                c.h2,
                *c == cell.selected
            );
        }
        written.extend(emit(&cell.records, cell.budget, &out_dir.join(cell_dir(cell.strategy, cell.budget)))?);
    }
    for (name, text) in [("summary.csv", summary), ("candidates.csv", candidates)] {
        let path = out_dir.join(name);
        write(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

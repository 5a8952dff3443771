//! Grid search over learning rate and `h₂`, selected on validation.

use rayon::prelude::*;

use super::{lower_is_better, run_seeds, Plan, Prepared, RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::privatizer::{ClipStrategyConfig, StrategyKind};

/// One grid point, scored over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub learning_rate: f64,
    pub h2: f64,
    /// Mean validation metric; `None` if any seed diverged.
    pub val_mean: Option<f64>,
}

/// A (strategy, budget) cell with its selected hyperparameters.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub strategy: StrategyKind,
    pub budget: Option<f64>,
    pub sigma: f64,
    pub candidates: Vec<Candidate>,
    pub selected: Candidate,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

fn uses_h2(kind: StrategyKind) -> bool {
    matches!(kind, StrategyKind::GeoclipFull | StrategyKind::GeoclipLowrank | StrategyKind::Adaclip)
}

fn cell_config(base: &RunConfig, strategy: &ClipStrategyConfig, budget: Option<f64>) -> RunConfig {
    let mut config = base.clone();
    config.strategy = strategy.clone();
    config.privacy.epsilon = budget;
    config
}

/// Runs every (strategy, budget) cell of `config.sweep` over the η × h₂ grid
/// and keeps, per cell, the candidate with the best mean validation metric.
pub fn sweep(config: &RunConfig) -> Result<SweepResult> {
    let grid = config.sweep.as_ref().ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let data = Prepared::from_config(config)?;
    let lower = lower_is_better(&data.model);
    let budgets: Vec<Option<f64>> =
        if grid.epsilons.is_empty() { vec![config.privacy.epsilon] } else { grid.epsilons.iter().copied().map(Some).collect() };

    let mut jobs = Vec::new();
    for strategy in &grid.strategies {
        for &budget in &budgets {
            jobs.push((strategy, budget));
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(strategy, budget)| sweep_cell(config, &data, strategy, budget, lower))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { cells })
}

fn sweep_cell(
    config: &RunConfig,
    data: &Prepared,
    strategy: &ClipStrategyConfig,
    budget: Option<f64>,
    lower: bool,
) -> Result<SweepCell> {
    let grid = config.sweep.as_ref().expect("checked by caller");
    let h2s = if uses_h2(strategy.kind) { grid.h2.clone() } else { vec![strategy.h2] };
    let base_plan = Plan::new(&cell_config(config, strategy, budget), data.train.len())?;
    let seeds = &config.train.seeds;

    let points: Vec<(f64, f64)> =
        grid.learning_rates.iter().flat_map(|&lr| h2s.iter().map(move |&h2| (lr, h2))).collect();
    let outcomes: Vec<(Candidate, Option<Vec<RunRecord>>)> = points
        .par_iter()
        .map(|&(learning_rate, h2)| {
            let mut plan = base_plan.clone();
            plan.learning_rate = learning_rate;
            plan.strategy.h2 = h2;
            match run_seeds(data, &plan, seeds) {
                Ok(records) => {
                    let val_mean = records.iter().map(|r| r.val_metric).sum::<f64>() / records.len() as f64;
                    let val_mean = val_mean.is_finite().then_some(val_mean);
                    Ok((Candidate { learning_rate, h2, val_mean }, val_mean.map(|_| records)))
                }
                Err(Error::Diverged { .. }) => Ok((Candidate { learning_rate, h2, val_mean: None }, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let better = |a: f64, b: f64| if lower { a < b } else { a > b };
    let mut best: Option<usize> = None;
    for (i, (cand, _)) in outcomes.iter().enumerate() {
        if let Some(v) = cand.val_mean {
            if best.is_none_or(|b| better(v, outcomes[b].0.val_mean.unwrap())) {
                best = Some(i);
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::Config(format!("every grid point diverged for {} at budget {budget:?}", strategy.kind))
    })?;
    let candidates: Vec<Candidate> = outcomes.iter().map(|(c, _)| c.clone()).collect();
    let (selected, records) = outcomes.into_iter().nth(best).unwrap();
    Ok(SweepCell {
        strategy: strategy.kind,
        budget,
        sigma: base_plan.strategy.sigma,
        candidates,
        selected,
        records: records.unwrap(),
    })
}

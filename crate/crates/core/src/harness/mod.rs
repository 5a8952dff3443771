//! Training runs, hyperparameter sweeps and CSV artifacts.

mod config;
mod emit;
mod sweep;

pub use config::{DataConfig, DataSource, ModelConfig, OutputConfig, PrivacyConfig, RunConfig, SweepConfig, TrainConfig};
pub use emit::{curve, emit, emit_sweep, summarize, CurvePoint, SummaryRow};
pub use sweep::{sweep, Candidate, SweepCell, SweepResult};

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::accountant::{sigma_for_target, PrivacyLedger, Release};
use crate::error::{Error, Result};
use crate::modeling::{
    gen_synthetic_classification, gen_synthetic_regression, load_csv, mean_loss, metric, per_sample_gradient, split,
    Dataset, ModelKind, ModelSpec, Schema, SplitSpec, Standardizer, TargetScaling,
};
use crate::privatizer::{ClipStrategy, ClipStrategyConfig, PrivatizedGradient};
use crate::rng::{derive, Stream};

/// Train/validation/test splits and the model they are fit with.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub model: ModelSpec,
    /// Training features with one sample per column, for fast batch gathers.
    train_rows: DMatrix<f64>,
}

impl Prepared {
    /// Builds the splits from the data section. Standardization and target
    /// scaling are fitted on the training split only.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let (data, scale_target) = match config.data.source {
            DataSource::Csv => {
                let path = config.data.path.as_deref().expect("validated");
                let schema = Schema::load(config.data.schema.as_deref().expect("validated"))?;
                (load_csv(path, &schema)?, schema.target_scaling)
            }
            DataSource::SyntheticRegression => (gen_synthetic_regression(&config.data.synthetic_spec().unwrap())?, false),
            DataSource::SyntheticClassification => {
                (gen_synthetic_classification(&config.data.synthetic_spec().unwrap())?, false)
            }
        };
        let (mut train, mut val, mut test) = split(&data, &SplitSpec::new(config.data.split_seed))?;
        if config.data.standardize {
            let st = Standardizer::fit(&train);
            (train, val, test) = (st.apply(&train), st.apply(&val), st.apply(&test));
        }
        if scale_target {
            let sc = TargetScaling::fit_min_max(&train);
            (train, val, test) = (sc.apply(&train), sc.apply(&val), sc.apply(&test));
        }
        let classes = match config.model.kind {
            ModelKind::Softmax => config.model.classes.unwrap_or_else(|| data.class_count()),
            _ => config.model.classes.unwrap_or(0),
        };
        let model = ModelSpec::new(config.model.kind, train.input_dim(), classes)?;
        let train_rows = train.features.transpose();
        Ok(Self { train, val, test, model, train_rows })
    }

    /// The training samples at `idx`; equal to `self.train.subset(idx)`.
    pub fn train_batch(&self, idx: &[usize]) -> Dataset {
        let mut batch = self.train.subset(&[]);
        let mut features = DMatrix::zeros(idx.len(), self.train_rows.nrows());
        for (i, &row) in idx.iter().enumerate() {
            features.row_mut(i).tr_copy_from(&self.train_rows.column(row));
        }
        batch.features = features;
        batch.targets = self.train.targets.select(idx);
        batch
    }
}

/// Resolved schedule for one (strategy, learning rate) setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub strategy: ClipStrategyConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sample_rate: f64,
    pub steps: u64,
    /// Steps after which the model is evaluated; always starts with 0.
    pub eval_steps: Vec<u64>,
    pub delta: f64,
}

impl Plan {
    /// `σ` comes from `privacy.epsilon` when set, else from the strategy.
    pub fn new(config: &RunConfig, train_len: usize) -> Result<Self> {
        let t = &config.train;
        if t.batch_size > train_len {
            return Err(Error::Config(format!("batch size {} exceeds training set size {train_len}", t.batch_size)));
        }
        let sample_rate = t.batch_size as f64 / train_len as f64;
        let (steps, eval_steps) = match (t.epochs, t.iterations) {
            (Some(epochs), _) => {
                let per_epoch = train_len.div_ceil(t.batch_size) as u64;
                (epochs * per_epoch, (0..=epochs).map(|e| e * per_epoch).collect())
            }
            (None, Some(iters)) => (iters, (0..=iters).collect()),
            (None, None) => unreachable!("validated"),
        };
        let mut strategy = config.strategy.clone();
        if let Some(eps) = config.privacy.epsilon {
            strategy.sigma = sigma_for_target(eps, sample_rate, steps, config.privacy.delta)?;
        }
        Ok(Self {
            strategy,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            sample_rate,
            steps,
            eval_steps,
            delta: config.privacy.delta,
        })
    }

    /// Gaussian releases made by every step.
    pub fn releases_per_step(&self) -> Vec<Release> {
        let mut sigmas = vec![self.strategy.sigma];
        if self.strategy.kind == crate::privatizer::StrategyKind::Quantile {
            sigmas.push(self.strategy.count_sigma);
        }
        sigmas.into_iter().map(|sigma| Release { sigma, sample_rate: self.sample_rate, steps: 1 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    /// Mean training loss.
    pub loss: f64,
    /// Test MSE or test accuracy in percent.
    pub metric: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub plan: Plan,
    pub rows: Vec<EvalRow>,
    /// Validation metric of the final parameters.
    pub val_metric: f64,
    pub params: DVector<f64>,
    /// Releases counted by the ledger.
    pub releases: u64,
    pub empty_batches: u64,
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn final_row(&self) -> EvalRow {
        *self.rows.last().expect("a record has at least the step-0 row")
    }
}

/// One training run, advanced a step at a time.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    data: &'a Prepared,
    plan: Plan,
    seed: u64,
    params: DVector<f64>,
    strategy: ClipStrategy,
    ledger: PrivacyLedger,
    step: u64,
    empty_batches: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Prepared, plan: Plan, seed: u64) -> Result<Self> {
        let dim = data.model.param_count();
        let strategy = ClipStrategy::new(plan.strategy.clone(), dim, plan.batch_size as f64)?;
        Ok(Self {
            data,
            plan,
            seed,
            params: DVector::zeros(dim),
            strategy,
            ledger: PrivacyLedger::new(),
            step: 0,
            empty_batches: 0,
        })
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn strategy(&self) -> &ClipStrategy {
        &self.strategy
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Poisson sample of training indices for the next step.
    pub fn sample_batch(&self) -> Vec<usize> {
        let mut rng = derive(self.seed, self.step + 1, Stream::Batch);
        let q = self.plan.sample_rate;
        (0..self.data.train.len()).filter(|_| rng.random::<f64>() < q).collect()
    }

    /// Runs one step on a Poisson-sampled batch. An empty batch moves nothing
    /// but its releases are still charged.
    pub fn step(&mut self) -> Result<Option<PrivatizedGradient>> {
        let idx = self.sample_batch();
        if idx.is_empty() {
            self.step += 1;
            self.empty_batches += 1;
            for r in self.plan.releases_per_step() {
                self.ledger.record(r.sigma, r.sample_rate);
            }
            return Ok(None);
        }
        let batch = self.data.train_batch(&idx);
        let grads = per_sample_gradient(&self.data.model, &self.params, &batch)?;
        self.step_on(&grads).map(Some)
    }

    /// Runs one step on given per-sample gradients (`d×n`): privatize, descend,
    /// then update the estimator for the next step's transform.
    pub fn step_on(&mut self, grads: &DMatrix<f64>) -> Result<PrivatizedGradient> {
        self.step += 1;
        let mut rng = derive(self.seed, self.step, Stream::GradientNoise);
        let released = self.strategy.privatize(grads, self.plan.sample_rate, &mut self.ledger, &mut rng)?;
        self.params.axpy(-self.plan.learning_rate, &released.value, 1.0);
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: self.step, loss: f64::NAN });
        }
        self.strategy.observe(&released.value)?;
        Ok(released)
    }

    pub fn evaluate(&self) -> Result<EvalRow> {
        let loss = mean_loss(&self.data.model, &self.params, &self.data.train)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        Ok(EvalRow {
            step: self.step,
            loss,
            metric: metric(&self.data.model, &self.params, &self.data.test)?,
            epsilon: self.ledger.epsilon(self.plan.delta)?,
        })
    }

    pub fn finish(self, rows: Vec<EvalRow>, started: Instant) -> Result<RunRecord> {
        Ok(RunRecord {
            seed: self.seed,
            val_metric: metric(&self.data.model, &self.params, &self.data.val)?,
            releases: self.ledger.total_releases(),
            empty_batches: self.empty_batches,
            plan: self.plan,
            rows,
            params: self.params,
            wall_clock: started.elapsed(),
        })
    }
}

/// Trains one seed to completion, evaluating on the plan's schedule.
pub fn train(data: &Prepared, plan: &Plan, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let mut trainer = Trainer::new(data, plan.clone(), seed)?;
    let mut rows = Vec::with_capacity(plan.eval_steps.len());
    let mut next_eval = plan.eval_steps.iter().peekable();
    loop {
        if next_eval.peek() == Some(&&trainer.steps_taken()) {
            next_eval.next();
            rows.push(trainer.evaluate()?);
        }
        if trainer.steps_taken() >= plan.steps {
            break;
        }
        trainer.step()?;
    }
    trainer.finish(rows, started)
}

/// Trains every seed of a config in parallel, in seed order.
pub fn run(config: &RunConfig) -> Result<Vec<RunRecord>> {
    let data = Prepared::from_config(config)?;
    let plan = Plan::new(config, data.train.len())?;
    run_seeds(&data, &plan, &config.train.seeds)
}

pub fn run_seeds(data: &Prepared, plan: &Plan, seeds: &[u64]) -> Result<Vec<RunRecord>> {
    seeds.par_iter().map(|&seed| train(data, plan, seed)).collect()
}

/// Whether lower values of the model's test metric are better.
pub fn lower_is_better(model: &ModelSpec) -> bool {
    model.is_regression()
}

//! Per-step gradient privatization.
//!
//! All strategies share one pipeline: per-sample clip, sum, a single Gaussian
//! draw, divide by the batch normalizer. GeoClip and AdaClip clip at unit norm
//! in a transformed basis; vanilla and quantile clipping clip at `C` in the
//! standard basis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::error::{check_dim, Error, Result};
use crate::estimator::{DiagVarState, FullCovState, LowRankState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_BETA3};
use crate::geometry::{EigenPairs, TransformPair};

/// Noise multiplier for the quantile baseline's clipped-count release.
pub const DEFAULT_COUNT_SIGMA: f64 = 10.0;
pub const DEFAULT_QUANTILE_LR: f64 = 0.2;
pub const DEFAULT_H1: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    GeoclipFull,
    GeoclipLowrank,
    Adaclip,
    Quantile,
    Vanilla,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::GeoclipFull => "geoclip_full",
            StrategyKind::GeoclipLowrank => "geoclip_lowrank",
            StrategyKind::Adaclip => "adaclip",
            StrategyKind::Quantile => "quantile",
            StrategyKind::Vanilla => "vanilla",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "geoclip_full" | "geoclip" => StrategyKind::GeoclipFull,
            "geoclip_lowrank" => StrategyKind::GeoclipLowrank,
            "adaclip" => StrategyKind::Adaclip,
            "quantile" => StrategyKind::Quantile,
            "vanilla" | "dpsgd" => StrategyKind::Vanilla,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipStrategyConfig {
    pub kind: StrategyKind,
    pub sigma: f64,
    #[serde(default)]
    pub rank: Option<usize>,
    /// Fixed `C` (vanilla) or initial `C` (quantile).
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_quantile_target")]
    pub quantile_target: f64,
    #[serde(default)]
    pub quantile_lr: Option<f64>,
    #[serde(default = "default_count_sigma")]
    pub count_sigma: f64,
    #[serde(default = "default_h1")]
    pub h1: f64,
    #[serde(default = "default_h2")]
    pub h2: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_beta3")]
    pub beta3: f64,
}

fn default_quantile_target() -> f64 {
    0.5
}
fn default_count_sigma() -> f64 {
    DEFAULT_COUNT_SIGMA
}
fn default_h1() -> f64 {
    DEFAULT_H1
}
fn default_h2() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_beta3() -> f64 {
    DEFAULT_BETA3
}

impl ClipStrategyConfig {
    fn base(kind: StrategyKind, sigma: f64) -> Self {
        Self {
            kind,
            sigma,
            rank: None,
            clip_norm: None,
            quantile_target: default_quantile_target(),
            quantile_lr: None,
            count_sigma: DEFAULT_COUNT_SIGMA,
            h1: DEFAULT_H1,
            h2: default_h2(),
            gamma: 1.0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            beta3: DEFAULT_BETA3,
        }
    }

    pub fn geoclip_full(sigma: f64, h2: f64) -> Self {
        Self { h2, ..Self::base(StrategyKind::GeoclipFull, sigma) }
    }

    pub fn geoclip_lowrank(sigma: f64, h2: f64, rank: usize) -> Self {
        Self { h2, rank: Some(rank), ..Self::base(StrategyKind::GeoclipLowrank, sigma) }
    }

    pub fn adaclip(sigma: f64, h2: f64) -> Self {
        Self { h2, ..Self::base(StrategyKind::Adaclip, sigma) }
    }

    pub fn vanilla(sigma: f64, clip_norm: f64) -> Self {
        Self { clip_norm: Some(clip_norm), ..Self::base(StrategyKind::Vanilla, sigma) }
    }

    pub fn quantile(sigma: f64, initial_clip: f64) -> Self {
        Self {
            clip_norm: Some(initial_clip),
            quantile_lr: Some(DEFAULT_QUANTILE_LR),
            ..Self::base(StrategyKind::Quantile, sigma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("strategy {}: {msg}", self.kind)));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        let needs_rank = self.kind == StrategyKind::GeoclipLowrank;
        if needs_rank != self.rank.is_some() {
            return bad(if needs_rank { "rank is required".into() } else { "rank only applies to geoclip_lowrank".into() });
        }
        if self.rank == Some(0) {
            return bad("rank must be positive".into());
        }
        let needs_clip = matches!(self.kind, StrategyKind::Vanilla | StrategyKind::Quantile);
        if needs_clip != self.clip_norm.is_some() {
            return bad(if needs_clip { "clip_norm is required".into() } else { "clip_norm only applies to vanilla and quantile".into() });
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        let needs_lr = self.kind == StrategyKind::Quantile;
        if needs_lr != self.quantile_lr.is_some() {
            return bad(if needs_lr { "quantile_lr is required".into() } else { "quantile_lr only applies to quantile".into() });
        }
        if !(self.quantile_target > 0.0 && self.quantile_target < 1.0) {
            return bad(format!("quantile_target must lie in (0, 1), got {}", self.quantile_target));
        }
        if !(self.h1 > 0.0 && self.h2 >= self.h1) {
            return bad(format!("need 0 < h1 <= h2, got h1={} h2={}", self.h1, self.h2));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        Ok(())
    }
}

/// A released gradient together with its clip statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedGradient {
    pub value: DVector<f64>,
    /// Fraction of samples whose norm exceeded the clip bound.
    pub clipped_fraction: f64,
}

fn gaussian_vector<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> DVector<f64> {
    if std == 0.0 {
        return DVector::zeros(len);
    }
    DVector::from_fn(len, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn check_batch(grads: &DMatrix<f64>, dim: usize) -> Result<()> {
    if grads.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    check_dim(dim, grads.nrows())
}

/// Scales each column to norm at most `bound`; returns the column sum and the
/// number of clipped columns.
fn clip_and_sum(columns: &DMatrix<f64>, bound: f64) -> (DVector<f64>, usize) {
    let mut sum = DVector::zeros(columns.nrows());
    let mut clipped = 0;
    for col in columns.column_iter() {
        let norm = col.norm();
        if norm > bound {
            clipped += 1;
            sum.axpy(bound / norm, &col, 1.0);
        } else {
            sum += col;
        }
    }
    (sum, clipped)
}

/// GeoClip step normalized by the realized batch size.
pub fn geoclip_step<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    transform: &TransformPair,
    mean: &DVector<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<PrivatizedGradient> {
    geoclip_step_scaled(grads, transform, mean, sigma, grads.ncols() as f64, rng)
}

/// GeoClip step: `ωᵢ = M(gᵢ − a)`, clip each to unit norm, sum, add
/// `N(0, σ²I_k)`, divide by `normalizer`, return `M⁻¹ω̃ + a`.
///
/// `grads` holds one per-sample gradient per column.
pub fn geoclip_step_scaled<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    transform: &TransformPair,
    mean: &DVector<f64>,
    sigma: f64,
    normalizer: f64,
    rng: &mut R,
) -> Result<PrivatizedGradient> {
    check_batch(grads, transform.dim())?;
    check_dim(transform.dim(), mean.len())?;
    let (forward, inverse) = (transform.forward(), transform.inverse());
    let omega = match transform.axes() {
        Some(axes) => DMatrix::from_fn(axes.len(), grads.ncols(), |r, i| {
            forward[(r, axes[r])] * (grads[(axes[r], i)] - mean[axes[r]])
        }),
        None => {
            let mut centered = grads.clone();
            for mut col in centered.column_iter_mut() {
                col -= mean;
            }
            forward * centered
        }
    };
    let (sum, clipped) = clip_and_sum(&omega, 1.0);
    let noisy = (sum + gaussian_vector(transform.rank(), sigma, rng)) / normalizer;
    let value = match transform.axes() {
        Some(axes) => {
            let mut value = mean.clone();
            for (r, &a) in axes.iter().enumerate() {
                value[a] += inverse[(a, r)] * noisy[r];
            }
            value
        }
        None => inverse * noisy + mean,
    };
    Ok(PrivatizedGradient { value, clipped_fraction: clipped as f64 / grads.ncols() as f64 })
}

/// Standard DP-SGD step normalized by the realized batch size.
pub fn vanilla_step<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    clip_norm: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<PrivatizedGradient> {
    vanilla_step_scaled(grads, clip_norm, sigma, grads.ncols() as f64, rng)
}

/// `(Σᵢ gᵢ·min(1, C/‖gᵢ‖) + N(0, σ²C²I)) / normalizer`.
pub fn vanilla_step_scaled<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    clip_norm: f64,
    sigma: f64,
    normalizer: f64,
    rng: &mut R,
) -> Result<PrivatizedGradient> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidParameter(format!("clip norm must be positive, got {clip_norm}")));
    }
    check_batch(grads, grads.nrows())?;
    let (sum, clipped) = clip_and_sum(grads, clip_norm);
    let noisy = (sum + gaussian_vector(grads.nrows(), sigma * clip_norm, rng)) / normalizer;
    Ok(PrivatizedGradient { value: noisy, clipped_fraction: clipped as f64 / grads.ncols() as f64 })
}

/// AdaClip as the diagonal special case: the basis is the standard one and the
/// eigenvalues are the per-coordinate variance estimates.
#[allow(clippy::too_many_arguments)]
pub fn adaclip_step<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    variances: &DVector<f64>,
    mean: &DVector<f64>,
    h1: f64,
    h2: f64,
    gamma: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<PrivatizedGradient> {
    let transform = diagonal_transform(variances, h1, h2, gamma)?;
    geoclip_step(grads, &transform, mean, sigma, rng)
}

pub fn diagonal_transform(variances: &DVector<f64>, h1: f64, h2: f64, gamma: f64) -> Result<TransformPair> {
    TransformPair::from_variances(variances, h1, h2, gamma)
}

/// Adaptive clip norm tracking a target quantile of per-sample norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileClipState {
    pub clip_norm: f64,
    pub lr: f64,
    pub target: f64,
    pub count_sigma: f64,
}

impl QuantileClipState {
    /// `C ← C·exp(−η(b̂ − target))`.
    pub fn updated(&self, unclipped_fraction: f64) -> Self {
        Self { clip_norm: self.clip_norm * (-self.lr * (unclipped_fraction - self.target)).exp(), ..*self }
    }
}

pub fn quantile_step<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    state: &QuantileClipState,
    sigma: f64,
    rng: &mut R,
) -> Result<(PrivatizedGradient, QuantileClipState)> {
    quantile_step_scaled(grads, state, sigma, grads.ncols() as f64, rng)
}

/// Vanilla step at the current `C`, then a noised count of unclipped samples
/// (noise `N(0, σ_b²)`) drives the geometric update of `C`.
pub fn quantile_step_scaled<R: Rng + ?Sized>(
    grads: &DMatrix<f64>,
    state: &QuantileClipState,
    sigma: f64,
    normalizer: f64,
    rng: &mut R,
) -> Result<(PrivatizedGradient, QuantileClipState)> {
    let released = vanilla_step_scaled(grads, state.clip_norm, sigma, normalizer, rng)?;
    let unclipped = grads.column_iter().filter(|c| c.norm() <= state.clip_norm).count() as f64;
    let noise = if state.count_sigma > 0.0 { state.count_sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
    let fraction = (unclipped + noise) / normalizer;
    Ok((released, state.updated(fraction)))
}

/// `σ²·Tr((MᵀM)⁻¹)`, the expected squared norm of the noise after mapping back.
pub fn noise_for_budget(sigma: f64, transform: &TransformPair) -> Result<f64> {
    if transform.rank() != transform.dim() {
        return Err(Error::InvalidRank { rank: transform.rank(), dim: transform.dim() });
    }
    Ok(sigma * sigma * transform.noise_trace())
}

#[derive(Debug, Clone)]
enum StrategyState {
    Full { estimator: FullCovState, transform: TransformPair },
    LowRank { estimator: LowRankState, transform: TransformPair },
    Diagonal { estimator: DiagVarState, transform: TransformPair },
    Quantile(QuantileClipState),
    Vanilla { clip_norm: f64 },
}

/// A clipping strategy with its adaptive state, selected by config alone.
#[derive(Debug, Clone)]
pub struct ClipStrategy {
    config: ClipStrategyConfig,
    normalizer: f64,
    state: StrategyState,
}

impl ClipStrategy {
    /// `normalizer` divides every noisy sum and scales covariance updates; the
    /// training loop passes the expected batch size.
    pub fn new(config: ClipStrategyConfig, dim: usize, normalizer: f64) -> Result<Self> {
        config.validate()?;
        if !(normalizer >= 1.0) {
            return Err(Error::InvalidParameter(format!("batch normalizer must be >= 1, got {normalizer}")));
        }
        let c = &config;
        let state = match c.kind {
            StrategyKind::GeoclipFull => StrategyState::Full {
                estimator: FullCovState::new(dim, c.beta1, c.beta2, normalizer)?,
                transform: TransformPair::identity(dim),
            },
            StrategyKind::GeoclipLowrank => {
                let rank = c.rank.expect("validated");
                let estimator = LowRankState::new(dim, rank, c.beta1, c.beta3, normalizer)?;
                let transform = TransformPair::from_eigen(&estimator.eigen(), c.h1, c.h2, c.gamma)?;
                StrategyState::LowRank { estimator, transform }
            }
            StrategyKind::Adaclip => StrategyState::Diagonal {
                estimator: DiagVarState::new(dim, c.beta1, c.beta2, normalizer)?,
                transform: TransformPair::identity(dim),
            },
            StrategyKind::Quantile => StrategyState::Quantile(QuantileClipState {
                clip_norm: c.clip_norm.expect("validated"),
                lr: c.quantile_lr.expect("validated"),
                target: c.quantile_target,
                count_sigma: c.count_sigma,
            }),
            StrategyKind::Vanilla => StrategyState::Vanilla { clip_norm: c.clip_norm.expect("validated") },
        };
        Ok(Self { config, normalizer, state })
    }

    pub fn config(&self) -> &ClipStrategyConfig {
        &self.config
    }

    pub fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    /// Noise multipliers of the Gaussian releases made by one step.
    pub fn release_sigmas(&self) -> Vec<f64> {
        match self.state {
            StrategyState::Quantile(s) => vec![self.config.sigma, s.count_sigma],
            _ => vec![self.config.sigma],
        }
    }

    /// Current basis transform, for the strategies that clip in one.
    pub fn transform(&self) -> Option<&TransformPair> {
        match &self.state {
            StrategyState::Full { transform, .. }
            | StrategyState::LowRank { transform, .. }
            | StrategyState::Diagonal { transform, .. } => Some(transform),
            _ => None,
        }
    }

    /// Current clip norm for the standard-basis strategies.
    pub fn clip_norm(&self) -> Option<f64> {
        match self.state {
            StrategyState::Quantile(s) => Some(s.clip_norm),
            StrategyState::Vanilla { clip_norm } => Some(clip_norm),
            _ => None,
        }
    }

    pub fn mean(&self) -> Option<&DVector<f64>> {
        match &self.state {
            StrategyState::Full { estimator, .. } => Some(&estimator.mean),
            StrategyState::LowRank { estimator, .. } => Some(&estimator.mean),
            StrategyState::Diagonal { estimator, .. } => Some(&estimator.mean),
            _ => None,
        }
    }

    pub fn snapshot(&self) -> Option<crate::estimator::Snapshot> {
        use crate::estimator::Snapshot;
        match &self.state {
            StrategyState::Full { estimator, .. } => Some(Snapshot::Full(estimator.clone())),
            StrategyState::LowRank { estimator, .. } => Some(Snapshot::LowRank(estimator.clone())),
            StrategyState::Diagonal { estimator, .. } => Some(Snapshot::Diagonal(estimator.clone())),
            _ => None,
        }
    }

    /// Privatizes one batch, recording each Gaussian release in `ledger`.
    pub fn privatize<R: Rng + ?Sized>(
        &mut self,
        grads: &DMatrix<f64>,
        sample_rate: f64,
        ledger: &mut PrivacyLedger,
        rng: &mut R,
    ) -> Result<PrivatizedGradient> {
        let sigma = self.config.sigma;
        let normalizer = self.normalizer;
        let out = match &mut self.state {
            StrategyState::Full { estimator, transform } => {
                geoclip_step_scaled(grads, transform, &estimator.mean, sigma, normalizer, rng)?
            }
            StrategyState::LowRank { estimator, transform } => {
                geoclip_step_scaled(grads, transform, &estimator.mean, sigma, normalizer, rng)?
            }
            StrategyState::Diagonal { estimator, transform } => {
                geoclip_step_scaled(grads, transform, &estimator.mean, sigma, normalizer, rng)?
            }
            StrategyState::Vanilla { clip_norm } => vanilla_step_scaled(grads, *clip_norm, sigma, normalizer, rng)?,
            StrategyState::Quantile(state) => {
                let (out, next) = quantile_step_scaled(grads, state, sigma, normalizer, rng)?;
                ledger.record(state.count_sigma, sample_rate);
                *state = next;
                out
            }
        };
        ledger.record(sigma, sample_rate);
        Ok(out)
    }

    /// Feeds a released gradient to the estimator and rebuilds the transform
    /// used by the next step.
    pub fn observe(&mut self, released: &DVector<f64>) -> Result<()> {
        let c = &self.config;
        match &mut self.state {
            StrategyState::Full { estimator, transform } => {
                estimator.update(released)?;
                *transform = TransformPair::from_eigen(&estimator.eigen()?, c.h1, c.h2, c.gamma)?;
            }
            StrategyState::LowRank { estimator, transform } => {
                estimator.update(released)?;
                *transform = TransformPair::from_eigen(&estimator.eigen(), c.h1, c.h2, c.gamma)?;
            }
            StrategyState::Diagonal { estimator, transform } => {
                estimator.update(released)?;
                *transform = diagonal_transform(&estimator.var, c.h1, c.h2, c.gamma)?;
            }
            StrategyState::Quantile(_) | StrategyState::Vanilla { .. } => {}
        }
        Ok(())
    }
}

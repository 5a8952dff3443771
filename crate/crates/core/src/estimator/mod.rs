//! Running estimates of the privatized-gradient mean and covariance.
//!
//! Everything here consumes only released (noisy) gradients, so updating the
//! estimators costs no privacy budget.

mod checkpoint;

pub use checkpoint::Snapshot;

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{check_dim, Error, Result};
use crate::geometry::EigenPairs;

pub const DEFAULT_BETA1: f64 = 0.99;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_BETA3: f64 = 0.99;

/// Singular values below this fraction of the largest are zeroed.
const SINGULAR_CUTOFF: f64 = 1e-12;

/// `β₁a + (1−β₁)g̃`.
pub fn update_mean(mean: &DVector<f64>, noisy: &DVector<f64>, beta1: f64) -> Result<DVector<f64>> {
    check_dim(mean.len(), noisy.len())?;
    Ok(mean * beta1 + noisy * (1.0 - beta1))
}

/// `√|B|·(g̃ − a)`. A rank-one update `(1−β)rrᵀ` with this residual carries the
/// mini-batch covariance scaling `|B|(1−β)(g̃−a)(g̃−a)ᵀ`.
pub fn batch_effective_residual(noisy: &DVector<f64>, mean: &DVector<f64>, batch_size: f64) -> DVector<f64> {
    (noisy - mean) * batch_size.sqrt()
}

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {beta}")))
    }
}

fn check_batch(batch_size: f64) -> Result<()> {
    if batch_size >= 1.0 && batch_size.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("batch size must be >= 1, got {batch_size}")))
    }
}

/// Full `d×d` exponential moving average of the gradient covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCovState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: f64,
    pub steps: u64,
}

impl FullCovState {
    /// `a₀ = 0`, `Σ₀ = I_d`.
    pub fn new(dim: usize, beta1: f64, beta2: f64, batch_size: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta2", beta2)?;
        check_batch(batch_size)?;
        Ok(Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
            beta1,
            beta2,
            batch_size,
            steps: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance first (centered on the old mean), then the mean.
    pub fn update(&mut self, noisy: &DVector<f64>) -> Result<()> {
        let next = update_cov_full(self, noisy)?;
        *self = next;
        Ok(())
    }

    pub fn eigen(&self) -> Result<EigenPairs> {
        EigenPairs::from_symmetric(&self.cov)
    }
}

/// One step of the full-covariance estimator:
/// `Σ ← β₂Σ + |B|(1−β₂)(g̃−a)(g̃−a)ᵀ` with `a` the pre-update mean, then
/// `a ← β₁a + (1−β₁)g̃`.
pub fn update_cov_full(state: &FullCovState, noisy: &DVector<f64>) -> Result<FullCovState> {
    check_dim(state.dim(), noisy.len())?;
    let residual = batch_effective_residual(noisy, &state.mean, state.batch_size);
    let mut cov = state.cov.clone();
    cov.ger(1.0 - state.beta2, &residual, &residual, state.beta2);
    Ok(FullCovState {
        mean: update_mean(&state.mean, noisy, state.beta1)?,
        cov,
        steps: state.steps + 1,
        ..state.clone()
    })
}

/// Per-coordinate variance EMA (the diagonal of [`FullCovState::cov`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagVarState {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: f64,
    pub steps: u64,
}

impl DiagVarState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, batch_size: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta2", beta2)?;
        check_batch(batch_size)?;
        Ok(Self {
            mean: DVector::zeros(dim),
            var: DVector::from_element(dim, 1.0),
            beta1,
            beta2,
            batch_size,
            steps: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, noisy: &DVector<f64>) -> Result<()> {
        check_dim(self.dim(), noisy.len())?;
        let residual = batch_effective_residual(noisy, &self.mean, self.batch_size);
        let beta2 = self.beta2;
        self.var.zip_apply(&residual, |v, r| *v = beta2 * *v + (1.0 - beta2) * r * r);
        self.mean = update_mean(&self.mean, noisy, self.beta1)?;
        self.steps += 1;
        Ok(())
    }

    pub fn eigen(&self) -> EigenPairs {
        EigenPairs::from_diagonal(&self.var)
    }
}

/// Top-`k` eigenpairs of the covariance, maintained in `O(dk)` memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub beta1: f64,
    pub beta3: f64,
    /// Residual scaling `√batch_size`; 1 disables mini-batch scaling.
    pub batch_size: f64,
    pub steps: u64,
    largest_intermediate: (usize, usize),
}

impl LowRankState {
    /// `a₀ = 0`, `U₀ = [e₁ … e_k]`, `Λ₀ = I_k`.
    pub fn new(dim: usize, rank: usize, beta1: f64, beta3: f64, batch_size: f64) -> Result<Self> {
        check_beta("beta1", beta1)?;
        check_beta("beta3", beta3)?;
        check_batch(batch_size)?;
        let init = EigenPairs::standard(dim, rank)?;
        let (basis, eigenvalues) = init.into_parts();
        Ok(Self {
            mean: DVector::zeros(dim),
            basis,
            eigenvalues,
            beta1,
            beta3,
            batch_size,
            steps: 0,
            largest_intermediate: (0, 0),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Mean first, then the eigenspace update centered on the new mean.
    pub fn update(&mut self, noisy: &DVector<f64>) -> Result<()> {
        check_dim(self.dim(), noisy.len())?;
        self.mean = update_mean(&self.mean, noisy, self.beta1)?;
        let z = batch_effective_residual(noisy, &self.mean, self.batch_size);
        let factor = augmented_factor(&self.basis, &self.eigenvalues, &z, self.beta3)?;
        self.largest_intermediate = factor.shape();
        let (basis, eigenvalues) = top_k_from_factor(factor, self.rank());
        self.basis = basis;
        self.eigenvalues = eigenvalues;
        self.steps += 1;
        Ok(())
    }

    pub fn eigen(&self) -> EigenPairs {
        EigenPairs::new(self.basis.clone(), self.eigenvalues.clone())
            .expect("basis and eigenvalues share the rank")
    }

    /// Shape of the largest matrix allocated by the last update.
    pub fn largest_intermediate(&self) -> (usize, usize) {
        self.largest_intermediate
    }
}

/// `[U z] · diag(√(β₃λ₁), …, √(β₃λ_k), √(1−β₃))`, a `d×(k+1)` square root of
/// `β₃UΛUᵀ + (1−β₃)zzᵀ`.
pub fn augmented_factor(
    basis: &DMatrix<f64>,
    eigenvalues: &DVector<f64>,
    z: &DVector<f64>,
    beta3: f64,
) -> Result<DMatrix<f64>> {
    let (d, k) = basis.shape();
    check_dim(k, eigenvalues.len())?;
    check_dim(d, z.len())?;
    if k == 0 || k > d {
        return Err(Error::InvalidRank { rank: k, dim: d });
    }
    let mut factor = DMatrix::zeros(d, k + 1);
    for (j, &lambda) in eigenvalues.iter().enumerate() {
        let weight = (beta3 * lambda.max(0.0)).sqrt();
        factor.column_mut(j).copy_from(&(basis.column(j) * weight));
    }
    factor.column_mut(k).copy_from(&(z * (1.0 - beta3).sqrt()));
    Ok(factor)
}

fn top_k_from_factor(factor: DMatrix<f64>, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    // thin QR first, then the SVD of the small square R
    let qr = factor.qr();
    let svd = SVD::new(qr.r(), true, false);
    let u = qr.q() * svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let values = DVector::from_iterator(
        k,
        svd.singular_values.iter().take(k).map(|&s| if s < SINGULAR_CUTOFF * top { 0.0 } else { s * s }),
    );
    (u.columns(0, k).into_owned(), values)
}

/// Top-`k` eigenpairs of `β₃UΛUᵀ + (1−β₃)zzᵀ` via a thin SVD of the
/// `d×(k+1)` factor. Never forms a `d×d` matrix.
pub fn streaming_rank_k_update(
    basis: &DMatrix<f64>,
    eigenvalues: &DVector<f64>,
    z: &DVector<f64>,
    beta3: f64,
) -> Result<EigenPairs> {
    let factor = augmented_factor(basis, eigenvalues, z, beta3)?;
    let (basis, values) = top_k_from_factor(factor, basis.ncols());
    EigenPairs::new(basis, values)
}

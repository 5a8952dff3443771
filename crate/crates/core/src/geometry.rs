//! Clipping-basis construction.
//!
//! Given an eigendecomposition `Σ = U Λ Uᵀ` of the estimated gradient
//! covariance, the transform that minimizes the injected-noise trace
//! `Tr((MᵀM)⁻¹)` subject to `Tr(MᵀMΣ) ≤ γ` is
//!
//! ```text
//! M    = s · Λ^{-1/4} Uᵀ        s = (γ / Σ√λᵢ)^{1/2}
//! M⁻¹  = s⁻¹ · U Λ^{1/4}
//! ```
//!
//! With `k < d` retained eigenpairs the same formulas give a `k×d` projection
//! and a `d×k` return map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Orthonormal eigenvectors (columns, `d×k`) with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl EigenPairs {
    /// Builds eigenpairs from columns and values, sorting into descending order.
    pub fn new(vectors: DMatrix<f64>, values: DVector<f64>) -> Result<Self> {
        check_dim(vectors.ncols(), values.len())?;
        if vectors.ncols() > vectors.nrows() {
            return Err(Error::InvalidRank { rank: vectors.ncols(), dim: vectors.nrows() });
        }
        Ok(sorted_descending(vectors, values))
    }

    /// Eigendecomposition of a symmetric matrix. The input is symmetrized as
    /// `(Σ + Σᵀ)/2` first.
    pub fn from_symmetric(matrix: &DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), found: matrix.ncols() });
        }
        let sym = (matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        Ok(sorted_descending(eig.eigenvectors, eig.eigenvalues))
    }

    /// Eigenpairs of `diag(variances)`: permuted standard basis vectors.
    pub fn from_diagonal(variances: &DVector<f64>) -> Self {
        let d = variances.len();
        sorted_descending(DMatrix::identity(d, d), variances.clone())
    }

    /// First `k` standard basis vectors with unit eigenvalues.
    pub fn standard(dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::InvalidRank { rank, dim });
        }
        Ok(Self { vectors: DMatrix::identity(dim, rank), values: DVector::from_element(rank, 1.0) })
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    /// `U Λ Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        scaled * self.vectors.transpose()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.vectors, self.values)
    }
}

fn sorted_descending(vectors: DMatrix<f64>, values: DVector<f64>) -> EigenPairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    if order.iter().enumerate().all(|(pos, &i)| pos == i) {
        return EigenPairs { vectors, values };
    }
    let vectors = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| values[i]));
    EigenPairs { vectors, values }
}

/// Replaces each eigenvalue by `min(hi, max(lo, λ))`, keeping descending order.
pub fn clamp_eigenvalues(eig: &EigenPairs, lo: f64, hi: f64) -> Result<EigenPairs> {
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::InvalidClamp { lo, hi });
    }
    let values = eig.values.map(|v| v.clamp(lo, hi));
    Ok(sorted_descending(eig.vectors.clone(), values))
}

/// Forward/inverse pair for clipping in a transformed basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformPair {
    forward: DMatrix<f64>,
    inverse: DMatrix<f64>,
    gamma: f64,
    clamp_lo: f64,
    clamp_hi: f64,
    /// Row `r` of `forward` is nonzero only in column `axes[r]`.
    axes: Option<Vec<usize>>,
}

/// For each column, the index of its single nonzero entry.
fn single_entry_axes(vectors: &DMatrix<f64>) -> Option<Vec<usize>> {
    vectors
        .column_iter()
        .map(|col| {
            let mut nonzero = col.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i);
            match (nonzero.next(), nonzero.next()) {
                (Some(i), None) => Some(i),
                _ => None,
            }
        })
        .collect()
}

impl TransformPair {
    /// `M = M⁻¹ = I_d`, the starting transform of the full-covariance loop.
    pub fn identity(dim: usize) -> Self {
        Self {
            forward: DMatrix::identity(dim, dim),
            inverse: DMatrix::identity(dim, dim),
            gamma: dim as f64,
            clamp_lo: 1.0,
            clamp_hi: 1.0,
            axes: Some((0..dim).collect()),
        }
    }

    /// Clamp to `[lo, hi]` and build the optimal transform.
    pub fn from_eigen(eig: &EigenPairs, lo: f64, hi: f64, gamma: f64) -> Result<Self> {
        let clamped = clamp_eigenvalues(eig, lo, hi)?;
        let mut pair = optimal_transform(&clamped, gamma)?;
        pair.clamp_lo = lo;
        pair.clamp_hi = hi;
        Ok(pair)
    }

    /// Same as `from_eigen(&EigenPairs::from_diagonal(variances), ..)` without
    /// building the permuted `d×d` basis.
    pub fn from_variances(variances: &DVector<f64>, lo: f64, hi: f64, gamma: f64) -> Result<Self> {
        if !(lo > 0.0) || !(hi >= lo) {
            return Err(Error::InvalidClamp { lo, hi });
        }
        if !(gamma > 0.0) || variances.iter().any(|v| v.is_nan()) {
            return Self::from_eigen(&EigenPairs::from_diagonal(variances), lo, hi, gamma);
        }
        let d = variances.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| variances[j].total_cmp(&variances[i]));
        let values: Vec<f64> = order.iter().map(|&i| variances[i].clamp(lo, hi)).collect();
        let root_sum: f64 = values.iter().map(|v| v.sqrt()).sum();
        let scale = (gamma / root_sum).sqrt();
        let mut forward = DMatrix::zeros(d, d);
        let mut inverse = DMatrix::zeros(d, d);
        for (r, (&axis, &lambda)) in order.iter().zip(&values).enumerate() {
            let quarter = lambda.powf(0.25);
            forward[(r, axis)] = scale / quarter;
            inverse[(axis, r)] = quarter / scale;
        }
        Ok(Self { forward, inverse, gamma, clamp_lo: lo, clamp_hi: hi, axes: Some(order) })
    }

    /// `k×d` matrix applied to centered gradients.
    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    /// `d×k` matrix mapping transformed vectors back.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn clamp_lo(&self) -> f64 {
        self.clamp_lo
    }

    pub fn clamp_hi(&self) -> f64 {
        self.clamp_hi
    }

    /// Set when the transform only scales and permutes coordinates.
    pub fn axes(&self) -> Option<&[usize]> {
        self.axes.as_deref()
    }

    pub fn rank(&self) -> usize {
        self.forward.nrows()
    }

    pub fn dim(&self) -> usize {
        self.forward.ncols()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.forward * x)
    }

    pub fn restore(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.rank(), w.len())?;
        Ok(&self.inverse * w)
    }

    /// `Tr((MᵀM)⁻¹)` evaluated as the squared Frobenius norm of the inverse map.
    pub fn noise_trace(&self) -> f64 {
        self.inverse.norm_squared()
    }
}

/// Optimal transform for strictly positive eigenvalues.
pub fn optimal_transform(eig: &EigenPairs, gamma: f64) -> Result<TransformPair> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if let Some((index, &value)) = eig.values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::SingularCovariance { index, value });
    }
    let root_sum: f64 = eig.values.iter().map(|v| v.sqrt()).sum();
    let scale = (gamma / root_sum).sqrt();

    // forward = s Λ^{-1/4} Uᵀ, inverse = s⁻¹ U Λ^{1/4}
    let mut forward = eig.vectors.transpose();
    let mut inverse = eig.vectors.clone();
    for (i, &lambda) in eig.values.iter().enumerate() {
        let quarter = lambda.powf(0.25);
        forward.row_mut(i).scale_mut(scale / quarter);
        inverse.column_mut(i).scale_mut(quarter / scale);
    }
    let lo = eig.values.min();
    let hi = eig.values.max();
    let axes = single_entry_axes(&eig.vectors);
    Ok(TransformPair { forward, inverse, gamma, clamp_lo: lo, clamp_hi: hi, axes })
}

/// Diagonal of `M Σ Mᵀ` under the optimal transform: `γ√λᵢ / Σⱼ√λⱼ`.
pub fn transformed_covariance_diag(eig: &EigenPairs, gamma: f64) -> DVector<f64> {
    let roots = eig.values.map(f64::sqrt);
    let total = roots.sum();
    roots * (gamma / total)
}

/// `(Σ√λᵢ)² / γ`, the minimal noise trace.
pub fn optimal_objective(values: &DVector<f64>, gamma: f64) -> f64 {
    let root_sum: f64 = values.iter().map(|v| v.sqrt()).sum();
    root_sum * root_sum / gamma
}

/// Noise trace of the whitening transform `√(γ/d) Λ^{-1/2} Uᵀ`: `d·Σλᵢ / γ`.
pub fn whitening_objective(values: &DVector<f64>, gamma: f64) -> f64 {
    values.len() as f64 * values.sum() / gamma
}

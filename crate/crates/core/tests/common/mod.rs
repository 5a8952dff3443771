//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls into the library's linear algebra.

#![allow(dead_code)]


use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use geoclip::estimator::LowRankState;

pub const SEEDS: [u64; 3] = [11, 2024, 90210];

/// Cyclic Jacobi eigensolver. Returns eigenvalues descending and the
/// matching eigenvectors as columns.
pub fn jacobi_eigen(matrix: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = matrix.nrows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (matrix[(i, j)] + matrix[(j, i)])).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[r][order[c]]);
    (values, vectors)
}

/// `f(A)` for symmetric `A` via its eigendecomposition.
pub fn sym_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (values, vectors) = jacobi_eigen(a);
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| vectors[(r, c)] * f(values[c]));
    scaled * vectors.transpose()
}

/// Minimizes `Tr(A⁻¹)` over positive definite `A` with `Tr(AΣ) ≤ γ`.
///
/// The constraint is active at the optimum and the objective scales as `1/c`
/// under `A → cA`, so the problem equals minimizing the scale-free
/// `Tr(A⁻¹)·Tr(AΣ)/γ`. That is done by Riemannian gradient descent on the
/// positive definite cone, `A ← A^{½} exp(−η A^{½} ∇ A^{½}) A^{½}`, started
/// from a random positive definite matrix.
pub fn min_noise_trace(sigma: &DMatrix<f64>, gamma: f64, rng: &mut impl Rng) -> f64 {
    let d = sigma.nrows();
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = &b * b.transpose() + DMatrix::identity(d, d);
    let eta = d as f64 / 4.0;
    let objective = |a: &DMatrix<f64>| sym_fn(a, |x| 1.0 / x).trace() * (a * sigma).trace() / gamma;
    let mut best = objective(&a);
    let mut stalled = 0;
    for _ in 0..5_000 {
        let root = sym_fn(&a, f64::sqrt);
        let inv = sym_fn(&a, |x| 1.0 / x);
        let (t_inv, t_sig) = (inv.trace(), (&a * sigma).trace());
        let g = -&inv / t_inv + &root * sigma * &root / t_sig;
        let g = (&g + g.transpose()) * 0.5;
        let step = sym_fn(&g, |x| (-eta * x).exp());
        a = &root * step * &root;
        a = (&a + a.transpose()) * 0.5;
        a /= a.trace();
        let value = objective(&a);
        stalled = if value < best * (1.0 - 1e-15) { 0 } else { stalled + 1 };
        best = best.min(value);
        if stalled >= 20 {
            break;
        }
    }
    best
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    for j in 0..d {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).into_owned();
                q.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    q
}

/// `QΛQᵀ` with log-uniform eigenvalues spanning the given condition number.
pub fn random_psd(d: usize, condition: f64, rng: &mut impl Rng) -> (DMatrix<f64>, Vec<f64>) {
    let q = random_orthogonal(d, rng);
    let mut values: Vec<f64> = (0..d).map(|_| condition.powf(-rng.random::<f64>())).collect();
    values[0] = 1.0;
    if d > 1 {
        values[d - 1] = 1.0 / condition;
    }
    let lam = DMatrix::from_diagonal(&DVector::from_row_slice(&values));
    let m = &q * lam * q.transpose();
    ((&m + m.transpose()) * 0.5, values)
}

/// `sin` of the largest principal angle between two orthonormal column
/// sets, bounded above by the Frobenius norm of `(I − QQᵀ)U`.
pub fn subspace_distance(u: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (u - q * (q.transpose() * u)).norm()
}

pub fn gaussian_vector(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Compares one low-rank update against the dense oracle of
/// `β₃UΛUᵀ + (1−β₃)zzᵀ`. Returns (max eigenvalue rel. error, subspace
/// distance or `None` when the k/k+1 gap is below 1e-6).
pub fn check_update(before: &LowRankState, after: &LowRankState, noisy: &DVector<f64>) -> (f64, Option<f64>) {
    let k = before.rank();
    let mean = &before.mean * before.beta1 + noisy * (1.0 - before.beta1);
    let z = (noisy - &mean) * before.batch_size.sqrt();
    let dense = &before.basis * DMatrix::from_diagonal(&before.eigenvalues) * before.basis.transpose() * before.beta3
        + &z * z.transpose() * (1.0 - before.beta3);
    let (values, vectors) = jacobi_eigen(&dense);
    let err = (0..k).map(|i| rel_err(after.eigenvalues[i], values[i])).fold(0.0, f64::max);
    let gap = values[k - 1] - values.get(k).copied().unwrap_or(0.0);
    let angle = (gap > 1e-6).then(|| subspace_distance(&after.basis, &vectors.columns(0, k).into_owned()));
    (err, angle)
}

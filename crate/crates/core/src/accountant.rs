//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Integer orders use the exact binomial expansion
//!
//! ```text
//! A_α = Σ_k C(α,k) (1−q)^{α−k} q^k exp(k(k−1)/(2σ²)),   ρ(α) = ln A_α / (α−1)
//! ```
//!
//! evaluated as `ln(A_α − 1)` over the `k ≥ 2` terms (the `k = 0, 1` terms of
//! `A_α − 1` vanish), which keeps full relative precision when `A_α` is close
//! to one. Fractional orders use the chord of the convex function `ln A_α`
//! between the neighbouring integers, an upper bound on the exact value.

use std::cell::OnceCell;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Bisection bracket for [`sigma_for_target`].
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);

const MAX_ORDER: u32 = 64;

/// Orders `1.25, 1.5, …, 64`.
pub fn default_orders() -> Vec<f64> {
    (5..=4 * MAX_ORDER).map(|i| i as f64 / 4.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    pub sigma: f64,
    pub sample_rate: f64,
    pub steps: u64,
    pub delta: f64,
}

impl PrivacySpec {
    pub fn new(sigma: f64, sample_rate: f64, steps: u64, delta: f64) -> Result<Self> {
        let spec = Self { sigma, sample_rate, steps, delta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!("sample rate must lie in (0, 1], got {}", self.sample_rate)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// A repeated Gaussian release: `steps` invocations at noise multiplier
/// `sigma` and Poisson rate `sample_rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Release {
    pub sigma: f64,
    pub sample_rate: f64,
    pub steps: u64,
}

impl From<&PrivacySpec> for Release {
    fn from(spec: &PrivacySpec) -> Self {
        Release { sigma: spec.sigma, sample_rate: spec.sample_rate, steps: spec.steps }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(eˣ − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln A_α` for integer `α ≥ 1`.
fn ln_moment_integer(sigma: f64, q: f64, alpha: u32) -> f64 {
    if alpha <= 1 {
        return 0.0;
    }
    let a = alpha as f64;
    if q >= 1.0 {
        return a * (a - 1.0) / (2.0 * sigma * sigma);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut ln_excess = f64::NEG_INFINITY;
    // ln C(α, k), advanced multiplicatively from C(α, 1) = α
    let mut ln_binom = a.ln();
    for k in 2..=alpha {
        let kf = k as f64;
        ln_binom += ((a - kf + 1.0) / kf).ln();
        let term = ln_binom
            + (a - kf) * ln_1mq
            + kf * ln_q
            + ln_expm1(kf * (kf - 1.0) / (2.0 * sigma * sigma));
        ln_excess = log_add(ln_excess, term);
    }
    // ln A = ln(1 + (A − 1))
    if ln_excess < 0.0 {
        ln_excess.exp().ln_1p()
    } else {
        ln_excess + (-ln_excess).exp().ln_1p()
    }
}

fn check_mechanism(sigma: f64, q: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be nonnegative, got {sigma}")));
    }
    if !(q >= 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!("sample rate must lie in [0, 1], got {q}")));
    }
    Ok(())
}

/// RDP of one subsampled Gaussian release at order `alpha`. A noiseless
/// release (`σ = 0`) has infinite cost.
pub fn rdp_subsampled_gaussian(sigma: f64, q: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::InvalidOrder(alpha));
    }
    check_mechanism(sigma, q)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let floor = alpha.floor();
    if floor == alpha && alpha <= u32::MAX as f64 {
        return Ok(ln_moment_integer(sigma, q, alpha as u32) / (alpha - 1.0));
    }
    let lo = floor as u32;
    let frac = alpha - floor;
    let chord = (1.0 - frac) * ln_moment_integer(sigma, q, lo) + frac * ln_moment_integer(sigma, q, lo + 1);
    Ok(chord / (alpha - 1.0))
}

/// RDP curve of one invocation over `orders`.
pub fn rdp_curve(sigma: f64, q: f64, orders: &[f64]) -> Result<Vec<f64>> {
    check_mechanism(sigma, q)?;
    if q == 0.0 {
        return Ok(vec![0.0; orders.len()]);
    }
    if sigma == 0.0 {
        return Ok(vec![f64::INFINITY; orders.len()]);
    }
    let max = orders.iter().fold(1.0f64, |m, &a| m.max(a)).ceil() as u32;
    let ln_moments: Vec<f64> = (0..=max).map(|n| ln_moment_integer(sigma, q, n)).collect();
    orders
        .iter()
        .map(|&alpha| {
            if !(alpha > 1.0) || !alpha.is_finite() {
                return Err(Error::InvalidOrder(alpha));
            }
            if q == 1.0 {
                return Ok(alpha / (2.0 * sigma * sigma));
            }
            let lo = alpha.floor() as usize;
            let frac = alpha - alpha.floor();
            let value = if frac == 0.0 {
                ln_moments[lo]
            } else {
                (1.0 - frac) * ln_moments[lo] + frac * ln_moments[lo + 1]
            };
            Ok(value / (alpha - 1.0))
        })
        .collect()
}

/// `min_α total(α) + ln(1/δ)/(α−1)`.
pub fn epsilon_from_rdp(orders: &[f64], total_rdp: &[f64], delta: f64) -> f64 {
    let log_inv_delta = -delta.ln();
    orders
        .iter()
        .zip(total_rdp)
        .map(|(&alpha, &rdp)| rdp + log_inv_delta / (alpha - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// ε after `spec.steps` releases. Zero releases cost nothing.
pub fn epsilon_of(spec: &PrivacySpec) -> Result<f64> {
    spec.validate()?;
    compose_heterogeneous(&[Release::from(spec)], spec.delta)
}

/// Order-wise sum of RDP across heterogeneous releases, then conversion.
pub fn compose_heterogeneous(releases: &[Release], delta: f64) -> Result<f64> {
    if releases.is_empty() {
        return Err(Error::InvalidParameter("no releases to compose".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if releases.iter().all(|r| r.steps == 0) {
        return Ok(0.0);
    }
    let orders = default_orders();
    let mut total = vec![0.0; orders.len()];
    for release in releases.iter().filter(|r| r.steps > 0) {
        let curve = rdp_curve(release.sigma, release.sample_rate, &orders)?;
        for (acc, rdp) in total.iter_mut().zip(curve) {
            *acc += release.steps as f64 * rdp;
        }
    }
    Ok(epsilon_from_rdp(&orders, &total, delta))
}

/// Noise multiplier reaching `target` ε, by bisection over [`SIGMA_BRACKET`].
pub fn sigma_for_target(target: f64, sample_rate: f64, steps: u64, delta: f64) -> Result<f64> {
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps = |sigma: f64| epsilon_of(&PrivacySpec::new(sigma, sample_rate, steps, delta)?);
    let infeasible = Error::InfeasibleTarget { target, lo, hi };
    if !(target > 0.0) || steps == 0 {
        return Err(infeasible);
    }
    let eps_hi_sigma = eps(hi)?;
    let eps_lo_sigma = eps(lo)?;
    if eps_hi_sigma > target || eps_lo_sigma < target * (1.0 - 1e-3) {
        return Err(infeasible);
    }
    let tol = 1e-3 * target;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let value = eps(mid)?;
        if (value - target).abs() <= tol {
            return Ok(mid);
        }
        // ε decreases in σ
        if value > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// ε after each listed step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpsilonCurve {
    pub points: Vec<(u64, f64)>,
}

impl EpsilonCurve {
    /// Evaluates ε at every step in `steps` for the given releases per step.
    pub fn for_steps(per_step: &[Release], steps: &[u64], delta: f64) -> Result<Self> {
        let orders = default_orders();
        let curves = per_step
            .iter()
            .map(|r| rdp_curve(r.sigma, r.sample_rate, &orders))
            .collect::<Result<Vec<_>>>()?;
        let mut points = Vec::with_capacity(steps.len());
        for &t in steps {
            let eps = if t == 0 {
                0.0
            } else {
                let total: Vec<f64> = (0..orders.len())
                    .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() * t as f64)
                    .collect();
                epsilon_from_rdp(&orders, &total, delta)
            };
            points.push((t, eps));
        }
        Ok(Self { points })
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,epsilon")?;
        for (step, eps) in &self.points {
            writeln!(out, "{step},{eps}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }
}

/// Running record of every Gaussian release made during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<Release>,
    /// RDP curve of each entry over [`default_orders`], filled on first use.
    curves: Vec<OnceCell<Vec<f64>>>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts one release; releases with the same mechanism merge.
    pub fn record(&mut self, sigma: f64, sample_rate: f64) {
        match self.entries.iter_mut().find(|r| r.sigma == sigma && r.sample_rate == sample_rate) {
            Some(r) => r.steps += 1,
            None => {
                self.entries.push(Release { sigma, sample_rate, steps: 1 });
                self.curves.push(OnceCell::new());
            }
        }
    }

    pub fn releases(&self) -> &[Release] {
        &self.entries
    }

    pub fn total_releases(&self) -> u64 {
        self.entries.iter().map(|r| r.steps).sum()
    }

    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        if self.entries.is_empty() {
            return Ok(0.0);
        }
        let orders = default_orders();
        let mut total = vec![0.0; orders.len()];
        for (release, cell) in self.entries.iter().zip(&self.curves) {
            let curve = match cell.get() {
                Some(c) => c,
                None => {
                    let c = rdp_curve(release.sigma, release.sample_rate, &orders)?;
                    cell.get_or_init(|| c)
                }
            };
            for (acc, rdp) in total.iter_mut().zip(curve) {
                *acc += release.steps as f64 * rdp;
            }
        }
        Ok(epsilon_from_rdp(&orders, &total, delta))
    }
}

//! One check per documented invariant, each parameterized by a global seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{check_update, gaussian_vector, jacobi_eigen, random_orthogonal, random_psd, rel_err};
use geoclip::accountant::{epsilon_of, rdp_subsampled_gaussian, EpsilonCurve, PrivacyLedger, PrivacySpec, Release};
use geoclip::estimator::{FullCovState, LowRankState};
use geoclip::geometry::{optimal_objective, optimal_transform, whitening_objective, EigenPairs, TransformPair};
use geoclip::harness::{self, Plan, Prepared, RunConfig, Trainer};
use geoclip::modeling::{
    gen_synthetic_classification, gen_synthetic_regression, mean_loss, per_sample_gradient, split, Dataset, ModelSpec,
    SplitSpec, Standardizer, SyntheticSpec, Targets,
};
use geoclip::privatizer::{geoclip_step, geoclip_step_scaled, vanilla_step, ClipStrategy, ClipStrategyConfig, StrategyKind};
use geoclip::rng::{derive, Stream};

type Check = fn(u64) -> Result<(), String>;

pub const ALL: [(&str, Check); 24] = [
    ("geometry: constraint is active", constraint_active),
    ("geometry: objective has closed form", closed_form_objective),
    ("geometry: whitening never beats the optimum", whitening_dominance),
    ("geometry: transformed samples are decorrelated", decorrelation),
    ("geometry: inverse restores the retained span", round_trip),
    ("geometry: eigenpairs orthonormal and descending", eigenpairs_valid),
    ("estimator: mean contracts geometrically", mean_contraction),
    ("estimator: full covariance stays PSD", covariance_psd),
    ("estimator: streaming update matches dense oracle", streaming_exact),
    ("estimator: low-rank memory stays O(dk)", memory_bound),
    ("privatizer: clipped samples lie in the unit ball", unit_ball),
    ("privatizer: sensitivity is one in transformed space", sensitivity),
    ("privatizer: clipped fraction is exact", clipped_fraction),
    ("privatizer: unclipped batches pass through", unbiased),
    ("privatizer: strategies share one interface", interface),
    ("accountant: ε monotone in T, q and 1/σ", accountant_monotone),
    ("accountant: q = 1 is the Gaussian mechanism", full_sampling),
    ("accountant: ε curve is nondecreasing", curve_nondecreasing),
    ("modeling: gradients match finite differences", finite_differences),
    ("modeling: standardization uses training data only", no_leakage),
    ("modeling: generators are deterministic", generators_deterministic),
    ("harness: runs are bit-reproducible", reproducible),
    ("harness: every release is charged", releases_charged),
    ("harness: each step uses the previous transform", sequencing),
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

fn random_transform(d: usize, k: usize, r: &mut ChaCha8Rng) -> TransformPair {
    let q = random_orthogonal(d, r);
    let values = DVector::from_fn(k, |_, _| 10f64.powf(r.random_range(-3.0..3.0)));
    optimal_transform(&EigenPairs::new(q.columns(0, k).into_owned(), values).unwrap(), r.random_range(0.1..5.0)).unwrap()
}

fn uniform(d: usize, n: usize, scale: f64, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, n, |_, _| scale * r.random_range(-1.0..1.0))
}

fn random_spd(r: &mut ChaCha8Rng) -> (DMatrix<f64>, f64) {
    let d = r.random_range(1..=6);
    let (sigma, _) = random_psd(d, 10f64.powf(r.random_range(0.0..4.0)), r);
    (sigma, r.random_range(0.1..5.0))
}

fn constraint_active(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 1);
    for _ in 0..50 {
        let (sigma, gamma) = random_spd(&mut r);
        let m = optimal_transform(&EigenPairs::from_symmetric(&sigma).unwrap(), gamma).unwrap().forward().clone();
        let lhs = (m.transpose() * &m * &sigma).trace();
        ensure(rel_err(lhs, gamma) <= 1e-9, || format!("Tr(MᵀMΣ) = {lhs}, γ = {gamma}"))?;
    }
    Ok(())
}

fn closed_form_objective(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 2);
    for _ in 0..50 {
        let (sigma, gamma) = random_spd(&mut r);
        let eig = EigenPairs::from_symmetric(&sigma).unwrap();
        let t = optimal_transform(&eig, gamma).unwrap();
        let want = optimal_objective(eig.values(), gamma);
        ensure(rel_err(t.noise_trace(), want) <= 1e-9, || format!("trace {} vs {want}", t.noise_trace()))?;
    }
    Ok(())
}

fn whitening_dominance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 3);
    for _ in 0..1000 {
        let d = r.random_range(1..10);
        let v = DVector::from_fn(d, |_, _| 10f64.powf(r.random_range(-4.0..4.0)));
        let (g, w) = (optimal_objective(&v, 1.0), whitening_objective(&v, 1.0));
        ensure(g <= w * (1.0 + 1e-12), || format!("optimal {g} > whitening {w}"))?;
    }
    Ok(())
}

fn decorrelation(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 4);
    let (sigma, values) = random_psd(3, 100.0, &mut r);
    let eig = EigenPairs::from_symmetric(&sigma).unwrap();
    let t = optimal_transform(&eig, 1.0).unwrap();
    let chol = sigma.clone().cholesky().unwrap().l();
    let n = 50_000;
    let mut acc = DMatrix::zeros(3, 3);
    for _ in 0..n {
        let y = t.forward() * (&chol * gaussian_vector(3, &mut r));
        acc += &y * y.transpose();
    }
    let cov = acc / n as f64;
    let roots: f64 = values.iter().map(|v| v.sqrt()).sum();
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { eig.values()[i].sqrt() / roots } else { 0.0 };
            let se = 5.0 * (2.0 / n as f64).sqrt() * cov.diagonal().max();
            ensure((cov[(i, j)] - want).abs() <= se, || format!("cov[{i},{j}] = {} want {want}", cov[(i, j)]))?;
        }
    }
    Ok(())
}

fn round_trip(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 5);
    for _ in 0..50 {
        let d = r.random_range(1..8);
        let k = r.random_range(1..=d);
        let t = random_transform(d, k, &mut r);
        let x = gaussian_vector(d, &mut r);
        let back = t.restore(&t.apply(&x).unwrap()).unwrap();
        let u = t.forward().transpose().columns(0, k).into_owned();
        let q = u.clone().qr().q();
        let proj = &q * (q.transpose() * &x);
        ensure((&back - &proj).norm() <= 1e-9 * x.norm().max(1.0), || format!("restore error {}", (&back - &proj).norm()))?;
    }
    Ok(())
}

fn eigenpairs_valid(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 6);
    for _ in 0..50 {
        let (sigma, _) = random_spd(&mut r);
        let eig = EigenPairs::from_symmetric(&sigma).unwrap();
        let u = eig.vectors();
        let orth = (u.transpose() * u - DMatrix::identity(u.ncols(), u.ncols())).abs().max();
        ensure(orth <= 1e-10, || format!("orthonormality error {orth}"))?;
        ensure(eig.values().as_slice().windows(2).all(|w| w[0] >= w[1]), || "values not descending".into())?;
        ensure((eig.reconstruct() - &sigma).abs().max() <= 1e-10 * sigma.abs().max(), || "reconstruction".into())?;
    }
    Ok(())
}

fn mean_contraction(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 7);
    let c = gaussian_vector(5, &mut r);
    let mut state = FullCovState::new(5, 0.9, 0.99, 8.0).unwrap();
    state.mean = gaussian_vector(5, &mut r) * 10.0;
    let start = (&state.mean - &c).norm();
    for t in 1..=300 {
        state.update(&c).unwrap();
        let bound = 0.9f64.powi(t) * start;
        let gap = (&state.mean - &c).norm();
        ensure(gap <= bound * (1.0 + 1e-12) + 1e-12, || format!("step {t}: |m - c| = {gap:e}, bound {bound:e}"))?;
    }
    Ok(())
}

fn covariance_psd(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 8);
    let d = 6;
    let scales = DVector::from_fn(d, |i, _| 10f64.powi(i as i32 - 3));
    let mut state = FullCovState::new(d, 0.9, 0.99, 16.0).unwrap();
    for step in 0..3000 {
        state.update(&gaussian_vector(d, &mut r).component_mul(&scales)).unwrap();
        if step % 300 == 299 {
            let asym = (&state.cov - state.cov.transpose()).abs().max();
            let min = *jacobi_eigen(&state.cov).0.last().unwrap();
            ensure(asym <= 1e-10 && min >= -1e-9, || format!("step {step}: asym {asym}, min eigenvalue {min}"))?;
        }
    }
    Ok(())
}

fn streaming_exact(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 9);
    let (d, k) = (12, 3);
    let mut state = LowRankState::new(d, k, 0.95, 0.95, 4.0).unwrap();
    let scales = DVector::from_fn(d, |i, _| 1.0 / (1.0 + i as f64));
    for step in 0..150 {
        let g = gaussian_vector(d, &mut r).component_mul(&scales);
        let before = state.clone();
        state.update(&g).unwrap();
        let (err, angle) = check_update(&before, &state, &g);
        ensure(err <= 1e-8 && angle.is_none_or(|a| a <= 1e-6), || format!("step {step}: err {err}, angle {angle:?}"))?;
    }
    Ok(())
}

fn memory_bound(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 10);
    let (d, k) = (50, 4);
    let mut state = LowRankState::new(d, k, 0.9, 0.9, 16.0).unwrap();
    for _ in 0..20 {
        state.update(&gaussian_vector(d, &mut r)).unwrap();
        ensure(state.largest_intermediate() == (d, k + 1), || format!("{:?}", state.largest_intermediate()))?;
    }
    ensure(state.basis.shape() == (d, k), || "basis shape".into())
}

fn unit_ball(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 11);
    for _ in 0..200 {
        let d = r.random_range(1..8);
        let k = r.random_range(1..=d);
        let t = random_transform(d, k, &mut r);
        let mean = uniform(d, 1, 1.0, &mut r).column(0).into_owned();
        let g = uniform(d, 1, r.random_range(0.01..100.0), &mut r);
        let out = geoclip_step_scaled(&g, &t, &mean, 0.0, 1.0, &mut r).unwrap();
        let norm = t.apply(&(out.value - &mean)).unwrap().norm();
        ensure(norm <= 1.0 + 1e-9, || format!("transformed norm {norm}"))?;
    }
    Ok(())
}

fn sensitivity(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 12);
    for _ in 0..200 {
        let d = r.random_range(1..8);
        let n = r.random_range(1..12);
        let t = random_transform(d, r.random_range(1..=d), &mut r);
        let mean = uniform(d, 1, 100.0, &mut r).column(0).into_owned();
        let grads = uniform(d, n, 10.0, &mut r);
        let extra = uniform(d, 1, 1e3, &mut r);
        let with = DMatrix::from_fn(d, n + 1, |i, j| if j < n { grads[(i, j)] } else { extra[(i, 0)] });
        let mut sum = |g: &DMatrix<f64>| {
            let out = geoclip_step_scaled(g, &t, &mean, 0.0, 1.0, &mut r).unwrap();
            t.apply(&(out.value - &mean)).unwrap()
        };
        let diff = (sum(&with) - sum(&grads)).norm();
        ensure(diff <= 1.0 + 1e-9, || format!("neighbouring sums differ by {diff}"))?;
    }
    Ok(())
}

fn clipped_fraction(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 13);
    for _ in 0..100 {
        let d = r.random_range(1..6);
        let n = r.random_range(1..40);
        let t = random_transform(d, d, &mut r);
        let mean = uniform(d, 1, 1.0, &mut r).column(0).into_owned();
        let grads = uniform(d, n, 2.0, &mut r);
        let out = geoclip_step(&grads, &t, &mean, 1.0, &mut r).unwrap();
        let count = grads.column_iter().filter(|g| t.apply(&(g - &mean)).unwrap().norm() > 1.0).count();
        ensure(out.clipped_fraction == count as f64 / n as f64, || "geoclip fraction".into())?;
        let v = vanilla_step(&grads, 1.0, 1.0, &mut r).unwrap();
        let count = grads.column_iter().filter(|g| g.norm() > 1.0).count();
        ensure(v.clipped_fraction == count as f64 / n as f64, || "vanilla fraction".into())?;
    }
    Ok(())
}

fn unbiased(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 14);
    let d = 5;
    let t = random_transform(d, d, &mut r);
    let mean = uniform(d, 1, 1.0, &mut r).column(0).into_owned();
    let offsets = uniform(d, 20, 1e-4, &mut r);
    let grads = DMatrix::from_fn(d, 20, |i, j| mean[i] + offsets[(i, j)]);
    let out = geoclip_step(&grads, &t, &mean, 0.0, &mut r).unwrap();
    let err = (out.value - grads.column_mean()).norm();
    ensure(out.clipped_fraction == 0.0 && err <= 1e-10, || format!("error {err}"))
}

fn interface(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 15);
    let d = 6;
    let grads = uniform(d, 16, 3.0, &mut r);
    let configs = [
        ClipStrategyConfig::geoclip_full(1.0, 10.0),
        ClipStrategyConfig::geoclip_lowrank(1.0, 10.0, 3),
        ClipStrategyConfig::adaclip(1.0, 10.0),
        ClipStrategyConfig::quantile(1.0, 1.0),
        ClipStrategyConfig::vanilla(1.0, 1.0),
    ];
    for config in configs {
        let mut strategy = ClipStrategy::new(config.clone(), d, 16.0).unwrap();
        let mut ledger = PrivacyLedger::new();
        for _ in 0..5 {
            let out = strategy.privatize(&grads, 0.01, &mut ledger, &mut r).unwrap();
            ensure(out.value.len() == d && out.value.iter().all(|v| v.is_finite()), || format!("{}", config.kind))?;
            strategy.observe(&out.value).unwrap();
        }
        let per_step = if config.kind == StrategyKind::Quantile { 2 } else { 1 };
        ensure(ledger.total_releases() == 5 * per_step, || format!("{} releases", config.kind))?;
    }
    Ok(())
}

fn accountant_monotone(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 16);
    let eps = |s: f64, q: f64, t: u64| epsilon_of(&PrivacySpec::new(s, q, t, 1e-5).unwrap()).unwrap();
    for _ in 0..100 {
        let (s, q, t) = (r.random_range(0.5..10.0), r.random_range(1e-4..0.5), r.random_range(1..2000));
        let base = eps(s, q, t);
        ensure(eps(s, q, t + 10) >= base, || format!("T at σ={s} q={q} T={t}"))?;
        ensure(eps(s, q * 1.5, t) >= base, || format!("q at σ={s} q={q} T={t}"))?;
        ensure(eps(s * 1.5, q, t) <= base, || format!("σ at σ={s} q={q} T={t}"))?;
    }
    Ok(())
}

fn full_sampling(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 17);
    for _ in 0..100 {
        let (s, a) = (r.random_range(0.3..20.0), r.random_range(1.1..64.0));
        let got = rdp_subsampled_gaussian(s, 1.0, a).unwrap();
        ensure(got == a / (2.0 * s * s), || format!("σ={s} α={a}: {got}"))?;
    }
    Ok(())
}

fn curve_nondecreasing(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 18);
    for _ in 0..20 {
        let per_step = [Release { sigma: r.random_range(0.5..5.0), sample_rate: r.random_range(1e-3..0.2), steps: 1 }];
        let steps: Vec<u64> = (0..30).map(|i| i * 37).collect();
        let c = EpsilonCurve::for_steps(&per_step, &steps, 1e-5).unwrap();
        ensure(c.is_nondecreasing() && c.points[0].1 == 0.0, || format!("{:?}", per_step[0]))?;
    }
    Ok(())
}

fn finite_differences(seed: u64) -> Result<(), String> {
    let mut r = rng(seed, 19);
    for case in 0..100 {
        let p = r.random_range(1..6);
        let (model, targets) = match case % 3 {
            0 => (ModelSpec::linear(p), Targets::Real(vec![r.random_range(-3.0..3.0)])),
            1 => (ModelSpec::logistic(p), Targets::Class(vec![r.random_range(0..2)])),
            _ => {
                let c = r.random_range(2..5);
                (ModelSpec::softmax(p, c), Targets::Class(vec![r.random_range(0..c)]))
            }
        };
        let x = DMatrix::from_fn(1, p, |_, _| r.random_range(-2.0..2.0));
        let theta = DVector::from_fn(model.param_count(), |_, _| r.random_range(-1.0..1.0));
        let sample = Dataset::new("fd", x, targets).unwrap();
        let analytic = per_sample_gradient(&model, &theta, &sample).unwrap().column(0).into_owned();
        let h = 1e-6;
        let numeric = DVector::from_fn(theta.len(), |j, _| {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += h;
            down[j] -= h;
            (mean_loss(&model, &up, &sample).unwrap() - mean_loss(&model, &down, &sample).unwrap()) / (2.0 * h)
        });
        let rel = (&analytic - &numeric).norm() / numeric.norm().max(1e-3);
        ensure(rel <= 1e-5, || format!("case {case} {:?}: rel {rel:e}", model.kind))?;
    }
    Ok(())
}

fn no_leakage(seed: u64) -> Result<(), String> {
    let data = gen_synthetic_regression(&SyntheticSpec { samples: 2000, ..SyntheticSpec::regression(seed) }).unwrap();
    let (train, _, mut test) = split(&data, &SplitSpec::new(seed)).unwrap();
    let st = Standardizer::fit(&train);
    for col in st.apply(&train).features.column_iter() {
        let mean = col.mean();
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        ensure(mean.abs() <= 1e-8 && (std - 1.0).abs() <= 1e-6, || format!("column mean {mean}, std {std}"))?;
    }
    test.features.row_mut(0).fill(1e6);
    ensure(Standardizer::fit(&train) == st, || "statistics depend on held-out data".into())
}

fn generators_deterministic(seed: u64) -> Result<(), String> {
    let spec = SyntheticSpec { samples: 300, ..SyntheticSpec::regression(seed) };
    ensure(gen_synthetic_regression(&spec).unwrap() == gen_synthetic_regression(&spec).unwrap(), || "regression".into())?;
    let spec = SyntheticSpec { samples: 300, ..SyntheticSpec::classification(seed) };
    let (a, b) = (gen_synthetic_classification(&spec).unwrap(), gen_synthetic_classification(&spec).unwrap());
    ensure(a == b, || "classification".into())
}

const SMALL: &str = r#"
name = "invariants"
[data]
source = "synthetic_regression"
samples = 1000
[model]
kind = "linear_regression"
[strategy]
kind = "geoclip_full"
sigma = 1.0
h2 = 10.0
[train]
learning_rate = 0.2
batch_size = 32
epochs = 2
seeds = [0]
"#;

fn small(seed: u64, extra: &[(&str, &str)]) -> RunConfig {
    let mut o = vec![("train.seeds".to_string(), format!("[{seed}]"))];
    o.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::parse(SMALL, &o).unwrap()
}

fn reproducible(seed: u64) -> Result<(), String> {
    for extra in [&[][..], &[("strategy.kind", "geoclip_lowrank"), ("strategy.rank", "3")][..]] {
        let cfg = small(seed, extra);
        let (a, b) = (harness::run(&cfg).unwrap(), harness::run(&cfg).unwrap());
        ensure(a[0].rows == b[0].rows && a[0].params == b[0].params, || format!("{:?}", cfg.strategy.kind))?;
    }
    Ok(())
}

fn releases_charged(seed: u64) -> Result<(), String> {
    let cfg = small(seed, &[("train.batch_size", "2"), ("train.epochs", ""), ("train.iterations", "300")]);
    let data = Prepared::from_config(&cfg).unwrap();
    let plan = Plan::new(&cfg, data.train.len()).unwrap();
    let record = harness::train(&data, &plan, seed).unwrap();
    ensure(record.empty_batches > 0 && record.releases == plan.steps, || {
        format!("{} releases over {} steps, {} empty", record.releases, plan.steps, record.empty_batches)
    })?;
    ensure(record.rows.windows(2).all(|w| w[1].epsilon >= w[0].epsilon), || "ε decreased".into())
}

fn sequencing(seed: u64) -> Result<(), String> {
    let cfg = small(seed, &[]);
    let data = Prepared::from_config(&cfg).unwrap();
    let plan = Plan::new(&cfg, data.train.len()).unwrap();
    let mut trainer = Trainer::new(&data, plan.clone(), seed).unwrap();
    for _ in 0..5 {
        trainer.step().unwrap();
    }
    let transform = trainer.strategy().transform().unwrap().clone();
    let mean = trainer.strategy().mean().unwrap().clone();
    let sentinel = DMatrix::from_element(data.model.param_count(), 8, 1e8);
    let mut step_rng = derive(seed, trainer.steps_taken() + 1, Stream::GradientNoise);
    let expected =
        geoclip_step_scaled(&sentinel, &transform, &mean, plan.strategy.sigma, plan.batch_size as f64, &mut step_rng).unwrap();
    ensure(trainer.step_on(&sentinel).unwrap() == expected, || "step did not use the pre-step transform".into())?;
    ensure(trainer.strategy().transform().unwrap() != &transform, || "transform not refreshed".into())
}

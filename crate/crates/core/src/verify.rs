//! Runtime oracle suites: divergence soundness of the RGM bound, exactness of
//! the greedy stability margin, the chi-square closed form, and the utility
//! bounds of private gradient descent. Each suite owns its random streams.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::accountant::{
    alpha_max, gaussian_renyi_divergence, min_baseline_variance, rgm_rdp_epsilon, RelativeSensitivity, RgmNoise,
};
use crate::dataset::FeatureDataset;
use crate::error::Result;
use crate::mechanisms::SeededRng;
use crate::optim::{
    convex_utility_bound, default_step_size, private_gd, strongly_convex_utility_bound, GdConfig, GradientNoise,
    StepMode,
};
use crate::quadratic::{build_quadratic, delta_plus, gaussian_rho, ClipShape, DeltaPlus, QuadraticModel, MARGIN_REL_TOL};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub violations: usize,
    /// Human-readable summary (worst case, extreme ratios).
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub delta_instances: usize,
    pub mc_samples: usize,
    pub utility_seeds: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 10_000,
            seed: 0,
            delta_instances: 200,
            mc_samples: 200_000,
            utility_seeds: 200,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            soundness_sweep(opts.trials, opts.seed)?.into_report(),
            delta_plus_equivalence(opts.delta_instances, opts.seed)?,
            gaussian_rho_agreement(opts.mc_samples, opts.seed),
            utility_monte_carlo(opts.utility_seeds, opts.seed)?,
        ],
    })
}

fn log_uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.uniform_open()).exp()
}

fn random_unit(rng: &mut SeededRng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.standard_normal());
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// One sampled configuration of the soundness sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCase {
    pub d: usize,
    pub eta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub r_rel: f64,
    pub sigma2: f64,
    pub norm_v: f64,
    pub norm_w: f64,
    pub mean_dist: f64,
    pub divergence: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub trials: usize,
    pub skipped: usize,
    pub violations: usize,
    /// Largest observed `divergence / bound`.
    pub max_ratio: f64,
    pub worst: Option<SweepCase>,
}

impl SweepReport {
    pub fn into_report(self) -> SuiteReport {
        SuiteReport {
            name: "rgm divergence soundness".into(),
            checks: self.trials - self.skipped,
            violations: self.violations,
            detail: format!(
                "max divergence/bound = {:.6}, skipped degenerate = {}{}",
                self.max_ratio,
                self.skipped,
                self.worst
                    .as_ref()
                    .map(|w| format!(", worst d={} eta={:.3e} alpha={:.4} gamma={:.3e}", w.d, w.eta, w.alpha, w.gamma))
                    .unwrap_or_default()
            ),
        }
    }
}

/// Largest `t` (by bisection) such that `w = v + t u` still satisfies
/// `|v - w|^2 <= eta^2 min(|v|^2, |w|^2) + r^2`.
pub fn boundary_step(v: &DVector<f64>, u: &DVector<f64>, eta: f64, r: f64) -> f64 {
    let slack = |t: f64| {
        let w = v + u * t;
        eta * eta * v.norm_squared().min(w.norm_squared()) + r * r - t * t
    };
    let mut lo = 0.0;
    let mut hi = (eta * eta * v.norm_squared() + r * r).sqrt() * 1.000_001 + f64::MIN_POSITIVE;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slack(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    lo
}

fn sweep_case(seed: u64, trial: usize) -> Result<Option<SweepCase>> {
    let mut rng = SeededRng::derived(seed, "sweep", 0, trial as u64);
    let d = 1 + rng.below(16) as usize;
    let eta = log_uniform(&mut rng, 1e-4, 0.3);
    let r_rel = if rng.below(4) == 0 { 0.0 } else { log_uniform(&mut rng, 1e-3, 1.0) };
    let sens = RelativeSensitivity::new(eta, r_rel)?;
    let amax = alpha_max(&sens)?;
    // half the orders land close to alpha_max, where the bound is tightest
    let u = rng.uniform_open();
    let frac = if rng.below(2) == 0 { u } else { 1.0 - u * u * 1e-3 };
    let alpha = 1.0 + (amax - 1.0) * frac;
    if !(alpha > 1.0 && alpha < amax) {
        return Ok(None);
    }
    let gamma = log_uniform(&mut rng, 1e-6, 1e2);
    let sigma2 = min_baseline_variance(&sens, gamma, alpha)?;
    let bound = rgm_rdp_epsilon(&sens, gamma, alpha, d)?.epsilon;

    // v = 0 with no absolute part forces w = v and a point mass, so skip it
    let v = if r_rel > 0.0 && rng.below(8) == 0 {
        DVector::zeros(d)
    } else {
        random_unit(&mut rng, d) * log_uniform(&mut rng, 1e-3, 1e3)
    };
    let dir = match (v.norm() > 0.0, rng.below(4)) {
        (true, 0) => v.normalize(),
        (true, 1) => -v.normalize(),
        _ => random_unit(&mut rng, d),
    };
    let t = boundary_step(&v, &dir, eta, r_rel);
    let w = &v + &dir * t;
    let noise = RgmNoise { gamma, sigma2 };
    let s1 = noise.variance(v.norm_squared());
    let s2 = noise.variance(w.norm_squared());
    if !(s1 > 0.0 && s2 > 0.0) {
        return Ok(None);
    }
    let dist = (&v - &w).norm();
    let fwd = gaussian_renyi_divergence(dist, s1, s2, alpha, d)?;
    let bwd = gaussian_renyi_divergence(dist, s2, s1, alpha, d)?;
    Ok(Some(SweepCase {
        d,
        eta,
        alpha,
        gamma,
        r_rel,
        sigma2,
        norm_v: v.norm(),
        norm_w: w.norm(),
        mean_dist: dist,
        divergence: fwd.max(bwd),
        bound,
    }))
}

/// Samples random configurations and boundary-saturating neighbouring outputs
/// and checks the exact Renyi divergence (both orders) against the RGM bound.
pub fn soundness_sweep(trials: usize, seed: u64) -> Result<SweepReport> {
    let cases: Vec<Option<SweepCase>> = (0..trials)
        .into_par_iter()
        .map(|i| sweep_case(seed, i))
        .collect::<Result<_>>()?;
    let mut report = SweepReport {
        trials,
        skipped: 0,
        violations: 0,
        max_ratio: 0.0,
        worst: None,
    };
    for case in cases {
        let Some(case) = case else {
            report.skipped += 1;
            continue;
        };
        if case.divergence > case.bound * (1.0 + 1e-12) + 1e-300 {
            report.violations += 1;
        }
        let ratio = if case.bound > 0.0 { case.divergence / case.bound } else { 0.0 };
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.worst = Some(case);
        }
    }
    Ok(report)
}

/// Best divergence-to-bound ratio found by scanning scalar neighbours
/// `w` of `v = 1` with `|v - w| <= eta min(|v|, |w|)`, no absolute part,
/// in both orders.
pub fn non_vacuity_ratio(eta: f64, gamma: f64, alpha: f64, grid: usize) -> Result<f64> {
    let sens = RelativeSensitivity::new(eta, 0.0)?;
    let bound = rgm_rdp_epsilon(&sens, gamma, alpha, 1)?.epsilon;
    let (lo, hi) = (1.0 / (1.0 + eta), 1.0 + eta);
    let mut best = 0.0f64;
    for k in 0..=grid {
        let w = lo + (hi - lo) * k as f64 / grid as f64;
        let dist = (1.0 - w).abs();
        if dist > eta * w.min(1.0) * (1.0 + 1e-15) {
            continue;
        }
        let (s1, s2) = (gamma, gamma * w * w);
        let div = gaussian_renyi_divergence(dist, s1, s2, alpha, 1)?.max(gaussian_renyi_divergence(dist, s2, s1, alpha, 1)?);
        best = best.max(div / bound);
    }
    Ok(best)
}

/// Scores computed through an eigendecomposition (pseudo-inverse), or
/// `None` when the matrix has a clearly negative eigenvalue.
fn eigen_scores(data: &FeatureDataset, model: &QuadraticModel, c: &DMatrix<f64>, rho: f64) -> Option<Vec<f64>> {
    let m = &model.a - c * rho;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let a_norm = SymmetricEigen::new(model.a.clone()).eigenvalues.amax();
    let tol = 1e-9 * a_norm;
    if eig.eigenvalues.min() < -tol {
        return None;
    }
    Some(
        (0..data.len())
            .map(|i| {
                let x = data.column(i);
                let mut s = 0.0;
                for k in 0..eig.eigenvalues.len() {
                    let p = eig.eigenvectors.column(k).dot(&x);
                    if eig.eigenvalues[k] > tol {
                        s += p * p / eig.eigenvalues[k];
                    } else if p.abs() > 1e-12 * x.norm() {
                        return f64::INFINITY;
                    }
                }
                s
            })
            .collect(),
    )
}

/// Minimum subset size whose scores reach `n`, by enumeration of all subsets.
pub fn exhaustive_margin(scores: &[f64], n: usize) -> DeltaPlus {
    let target = n as f64 * (1.0 - MARGIN_REL_TOL);
    let m = scores.len();
    let mut best: Option<usize> = None;
    for mask in 0u32..(1u32 << m) {
        let size = mask.count_ones() as usize;
        if best.is_some_and(|b| size >= b) {
            continue;
        }
        // sum in descending order so rounding matches a sorted accumulation
        let mut chosen: Vec<f64> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| scores[i]).collect();
        chosen.sort_by(|a, b| b.total_cmp(a));
        if chosen.iter().sum::<f64>() >= target {
            best = Some(size);
        }
    }
    best.map_or(DeltaPlus::Infinite, DeltaPlus::Finite)
}

/// Random small instance for the margin oracle: `(data, mu_reg, C, rho)`.
pub fn random_margin_instance(rng: &mut SeededRng) -> (FeatureDataset, f64, DMatrix<f64>, f64) {
    let n = 1 + rng.below(12) as usize;
    let d = 1 + rng.below(4) as usize;
    let scale = DVector::from_fn(d, |_, _| log_uniform(rng, 0.1, 10.0));
    let x = DMatrix::from_fn(d, n, |i, _| scale[i] * rng.standard_normal());
    let y = DVector::from_fn(n, |_, _| rng.standard_normal());
    let mu_reg = match rng.below(3) {
        0 => 0.0,
        1 => log_uniform(rng, 1e-3, 1e-1),
        _ => log_uniform(rng, 1.0, 1e3),
    };
    let g = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    let c = &g * g.transpose() + DMatrix::identity(d, d) * 0.5;
    let rho = log_uniform(rng, 1e-4, 10.0);
    let data = FeatureDataset::new(x, y).expect("finite draws");
    (data, mu_reg, c, rho)
}

pub fn delta_plus_equivalence(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut mismatches = 0;
    let (mut zeros, mut finite, mut infinite) = (0, 0, 0);
    for k in 0..instances {
        let mut rng = SeededRng::derived(seed, "delta-plus", 0, k as u64);
        let (data, mu_reg, c, rho) = random_margin_instance(&mut rng);
        let model = build_quadratic(&data, mu_reg)?;
        let shape = ClipShape::new(c.clone(), 1.0)?;
        let greedy = delta_plus(&data, &model, &shape, rho)?;
        let oracle = match eigen_scores(&data, &model, &c, rho) {
            None => DeltaPlus::Finite(0),
            Some(s) => exhaustive_margin(&s, data.len()),
        };
        match oracle {
            DeltaPlus::Finite(0) => zeros += 1,
            DeltaPlus::Finite(_) => finite += 1,
            DeltaPlus::Infinite => infinite += 1,
        }
        if greedy != oracle {
            mismatches += 1;
        }
    }
    Ok(SuiteReport {
        name: "delta_plus greedy vs exhaustive".into(),
        checks: instances,
        violations: mismatches,
        detail: format!("{zeros} not-PSD, {finite} finite, {infinite} infinite"),
    })
}

/// Monte Carlo estimate of `E[min(Q, c)] / (2d)`, `Q ~ chi^2(d)`, with its standard error.
pub fn gaussian_rho_monte_carlo(d: usize, r_c: f64, samples: usize, rng: &mut SeededRng) -> (f64, f64) {
    let c = r_c * r_c;
    // Welford: the saturated case has exactly zero spread
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=samples {
        let q: f64 = (0..d).map(|_| rng.standard_normal().powi(2)).sum();
        let v = q.min(c) / (2.0 * d as f64);
        let delta = v - mean;
        mean += delta / k as f64;
        m2 += delta * (v - mean);
    }
    let n = samples as f64;
    (mean, (m2 / (n - 1.0) / n).sqrt())
}

pub fn gaussian_rho_agreement(samples: usize, seed: u64) -> SuiteReport {
    let mut configs = Vec::new();
    for d in [1usize, 2, 5, 10] {
        for c in [1.0, d as f64, 2.0 * d as f64, 100.0 * d as f64] {
            configs.push((d, c));
        }
    }
    let results: Vec<(usize, f64, f64)> = configs
        .par_iter()
        .enumerate()
        .map(|(k, &(d, c))| {
            let mut rng = SeededRng::derived(seed, "gaussian-rho", d as u64, k as u64);
            let r_c = c.sqrt();
            let (mc, se) = gaussian_rho_monte_carlo(d, r_c, samples, &mut rng);
            // a single unsaturated sample moves the mean by at most c / (2 d N),
            // so a rare tail that no sample hit is only resolved to that grain
            let grain = c / (2.0 * d as f64 * samples as f64);
            let excess = ((gaussian_rho(d, r_c) - mc).abs() - grain).max(0.0);
            let z = if se > 0.0 { excess / se } else if excess > 0.0 { f64::INFINITY } else { 0.0 };
            (d, c, z)
        })
        .collect();
    let violations = results.iter().filter(|r| r.2 > 3.0).count();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    SuiteReport {
        name: "gaussian_rho closed form vs Monte Carlo".into(),
        checks: results.len(),
        violations,
        detail: format!("{samples} samples per config, worst |z| = {worst:.3}"),
    }
}

/// Outcome of the utility Monte Carlo at every iteration.
#[derive(Debug, Clone, Serialize)]
pub struct UtilityCheck {
    pub mean_dist_sq: Vec<f64>,
    pub se_dist_sq: Vec<f64>,
    pub strong_bound: Vec<f64>,
    pub mean_avg_gap: Vec<f64>,
    pub se_avg_gap: Vec<f64>,
    pub convex_bound: Vec<f64>,
    pub strong_violations: usize,
    pub convex_violations: usize,
}

/// Diagonal quadratic with eigenvalues spread over `[mu, l]`.
pub fn utility_model(d: usize, mu: f64, l: f64, seed: u64) -> QuadraticModel {
    let mut rng = SeededRng::derived(seed, "utility-model", 0, 0);
    let diag = DVector::from_fn(d, |i, _| {
        if d == 1 {
            mu
        } else {
            mu + (l - mu) * i as f64 / (d - 1) as f64
        }
    });
    let q = DMatrix::from_fn(d, d, |_, _| rng.standard_normal()).qr().q();
    let a = &q * DMatrix::from_diagonal(&diag) * q.transpose();
    QuadraticModel {
        a: (&a + a.transpose()) * 0.5,
        b: DVector::from_fn(d, |_, _| rng.standard_normal()),
        mu_reg: 0.0,
        n: 1,
        offset: 0.0,
    }
}

/// Mean `|theta_t - theta*|^2` and averaged-iterate gap over `seeds` runs of
/// RGM gradient descent, against both utility bounds with effective
/// constants `gamma d` and `sigma2 d`, within 4 standard errors.
pub fn utility_check(
    model: &QuadraticModel,
    mu: f64,
    l: f64,
    noise: RgmNoise,
    iters: usize,
    seeds: usize,
    base_seed: u64,
) -> Result<UtilityCheck> {
    let d = model.dim();
    let tau = default_step_size(l, noise.gamma, d, StepMode::Theorem, 0.0)?;
    let theta0 = DVector::zeros(d);
    let runs: Vec<_> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            private_gd(
                model,
                &GdConfig {
                    tau,
                    iters,
                    theta0: theta0.clone(),
                    noise: GradientNoise::Rgm(noise),
                    seed: base_seed.wrapping_add(s as u64),
                },
            )
        })
        .collect::<Result<_>>()?;
    let stats = |f: &dyn Fn(usize, usize) -> f64| -> (Vec<f64>, Vec<f64>) {
        (0..=iters)
            .map(|t| {
                let xs: Vec<f64> = (0..seeds).map(|s| f(s, t)).collect();
                let n = seeds as f64;
                let m = xs.iter().sum::<f64>() / n;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                (m, (v / n).sqrt())
            })
            .unzip()
    };
    let (mean_dist_sq, se_dist_sq) = stats(&|s, t| runs[s].dist_sq_to_opt[t]);
    let (mean_avg_gap, se_avg_gap) = stats(&|s, t| runs[s].avg_function_gap[t]);
    let dist0 = runs[0].dist_sq_to_opt[0];
    let sigma2_total = d as f64 * noise.sigma2;
    let strong_bound: Vec<f64> = (0..=iters)
        .map(|t| strongly_convex_utility_bound(t, tau, mu, sigma2_total, dist0))
        .collect::<Result<_>>()?;
    let mut convex_bound = vec![f64::INFINITY];
    for t in 1..=iters {
        convex_bound.push(convex_utility_bound(t, tau, sigma2_total, dist0)?);
    }
    let strong_violations = (0..=iters)
        .filter(|&t| mean_dist_sq[t] > strong_bound[t] + 4.0 * se_dist_sq[t])
        .count();
    let convex_violations = (1..=iters)
        .filter(|&t| mean_avg_gap[t] > convex_bound[t] + 4.0 * se_avg_gap[t])
        .count();
    Ok(UtilityCheck {
        mean_dist_sq,
        se_dist_sq,
        strong_bound,
        mean_avg_gap,
        se_avg_gap,
        convex_bound,
        strong_violations,
        convex_violations,
    })
}

pub fn utility_monte_carlo(seeds: usize, seed: u64) -> Result<SuiteReport> {
    let model = utility_model(5, 0.5, 2.0, seed);
    let noise = RgmNoise::new(1e-4, 1e-4)?;
    let check = utility_check(&model, 0.5, 2.0, noise, 200, seeds, seed)?;
    Ok(SuiteReport {
        name: "private GD utility bounds".into(),
        checks: 2 * 200 + 1,
        violations: check.strong_violations + check.convex_violations,
        detail: format!(
            "{seeds} seeds; final mean dist_sq = {:.3e} vs bound {:.3e}",
            check.mean_dist_sq[200], check.strong_bound[200]
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_step_saturates() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let u = v.normalize();
        let t = boundary_step(&v, &u, 0.1, 0.0);
        assert!((t - 0.5).abs() < 1e-12);
        let t = boundary_step(&v, &-u, 0.1, 0.0);
        // |v| - t = w, t = 0.1 w
        assert!((t - 5.0 / 11.0).abs() < 1e-12);
        let z = DVector::zeros(2);
        let t = boundary_step(&z, &DVector::from_vec(vec![1.0, 0.0]), 0.1, 0.3);
        assert!((t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn small_sweep_is_clean() {
        let r = soundness_sweep(500, 3).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
        assert!(r.max_ratio > 0.0);
    }

    #[test]
    fn exhaustive_margin_cases() {
        assert_eq!(exhaustive_margin(&[2.0, 2.0, 2.0, 2.0], 4), DeltaPlus::Finite(2));
        assert_eq!(exhaustive_margin(&[0.1, 0.2], 2), DeltaPlus::Infinite);
        assert_eq!(exhaustive_margin(&[f64::INFINITY, 0.0], 2), DeltaPlus::Finite(1));
    }

    #[test]
    fn small_delta_suite_is_clean() {
        let r = delta_plus_equivalence(40, 1).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

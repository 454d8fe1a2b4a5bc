//! Gradient descent on quadratic objectives with privatised gradients, plus
//! the matching utility bounds.
//!
//! Noise is drawn from a fresh stream per iteration, derived from
//! `(seed, "gd", 0, t)`, so trajectories are reproducible and independent of
//! how runs are scheduled.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::accountant::RgmNoise;
use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::mechanisms::{clip_to_norm, gaussian_mechanism, relative_gaussian_mechanism, SeededRng};
use crate::quadratic::{build_quadratic, QuadraticModel};

pub(crate) const GD_STREAM_TAG: &str = "gd";

/// How each gradient is privatised before the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientNoise {
    None,
    Rgm(RgmNoise),
    /// Per-sample clipping to `threshold`, then `N(0, sigma2 I)` on the mean.
    ClippedGm { threshold: f64, sigma2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub tau: f64,
    pub iters: usize,
    pub theta0: DVector<f64>,
    pub noise: GradientNoise,
    pub seed: u64,
}

impl GdConfig {
    fn validate(&self, d: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::domain("GdConfig", format!("tau > 0 (tau = {})", self.tau)));
        }
        if self.iters == 0 {
            return Err(Error::domain("GdConfig", "T >= 1"));
        }
        if self.theta0.len() != d {
            return Err(Error::DimensionMismatch {
                op: "GdConfig",
                expected: d,
                got: self.theta0.len(),
            });
        }
        Ok(())
    }
}

/// Iterates and per-step metrics. Sequences indexed by `t = 0..=T` except
/// `noise_power`, which has one entry per step (`T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<DVector<f64>>,
    pub dist_sq_to_opt: Vec<f64>,
    /// `f(theta_t) - f(theta*)`.
    pub function_gap: Vec<f64>,
    /// `f(mean(theta_0..theta_{t-1})) - f(theta*)`; entry 0 uses `theta_0`.
    pub avg_function_gap: Vec<f64>,
    /// Realised `|xi_t|^2`.
    pub noise_power: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last_dist_sq(&self) -> f64 {
        *self.dist_sq_to_opt.last().expect("trajectory has at least theta0")
    }

    /// Rows `t, dist_sq, fgap, noise_power, avg_fgap`; the last row has no noise.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        (0..self.len())
            .map(|t| {
                vec![
                    t.to_string(),
                    self.dist_sq_to_opt[t].to_string(),
                    self.function_gap[t].to_string(),
                    self.noise_power.get(t).map(|v| v.to_string()).unwrap_or_default(),
                    self.avg_function_gap[t].to_string(),
                ]
            })
            .collect()
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 5] = ["t", "dist_sq", "fgap", "noise_power", "avg_fgap"];

/// Accumulates metrics against a fixed reference minimiser.
pub(crate) struct Recorder<'a> {
    model: &'a QuadraticModel,
    theta_star: DVector<f64>,
    f_star: f64,
    running_sum: DVector<f64>,
    traj: Trajectory,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(model: &'a QuadraticModel, theta0: &DVector<f64>, theta_star: DVector<f64>) -> Self {
        let f_star = model.value(&theta_star);
        let mut rec = Recorder {
            model,
            theta_star,
            f_star,
            running_sum: DVector::zeros(theta0.len()),
            traj: Trajectory {
                iterates: Vec::new(),
                dist_sq_to_opt: Vec::new(),
                function_gap: Vec::new(),
                avg_function_gap: Vec::new(),
                noise_power: Vec::new(),
            },
        };
        rec.push(theta0.clone());
        rec
    }

    pub(crate) fn push(&mut self, theta: DVector<f64>) {
        let t = self.traj.iterates.len();
        let gap = self.model.value(&theta) - self.f_star;
        let avg_gap = if t == 0 {
            gap
        } else {
            let avg = &self.running_sum / t as f64;
            self.model.value(&avg) - self.f_star
        };
        self.running_sum += &theta;
        self.traj.dist_sq_to_opt.push((&theta - &self.theta_star).norm_squared());
        self.traj.function_gap.push(gap);
        self.traj.avg_function_gap.push(avg_gap);
        self.traj.iterates.push(theta);
    }

    pub(crate) fn push_noise(&mut self, power: f64) {
        self.traj.noise_power.push(power);
    }

    pub(crate) fn finish(self) -> Trajectory {
        self.traj
    }
}

fn step_rng(seed: u64, t: usize) -> SeededRng {
    SeededRng::derived(seed, GD_STREAM_TAG, 0, t as u64)
}

fn descend<F>(model: &QuadraticModel, cfg: &GdConfig, mut release: F) -> Result<Trajectory>
where
    F: FnMut(&DVector<f64>, &mut SeededRng) -> Result<(DVector<f64>, f64)>,
{
    cfg.validate(model.dim())?;
    let theta_star = model.reference_minimizer(&cfg.theta0);
    let mut rec = Recorder::new(model, &cfg.theta0, theta_star);
    let mut theta = cfg.theta0.clone();
    for t in 0..cfg.iters {
        let mut rng = step_rng(cfg.seed, t);
        let (g, power) = release(&theta, &mut rng)?;
        theta -= g * cfg.tau;
        rec.push_noise(power);
        rec.push(theta.clone());
    }
    Ok(rec.finish())
}

/// Gradient descent whose gradients go through the relative Gaussian mechanism.
pub fn private_gd(model: &QuadraticModel, cfg: &GdConfig) -> Result<Trajectory> {
    let GradientNoise::Rgm(noise) = cfg.noise else {
        return Err(Error::precondition("private_gd", "noise must be rgm"));
    };
    descend(model, cfg, |theta, rng| {
        let g = model.gradient(theta);
        let out = relative_gaussian_mechanism(&g, &noise, rng)?;
        let power = (&out - &g).norm_squared();
        Ok((out, power))
    })
}

/// Exact, noiseless gradient descent.
pub fn vanilla_gd(model: &QuadraticModel, cfg: &GdConfig) -> Result<Trajectory> {
    if cfg.noise != GradientNoise::None {
        return Err(Error::precondition("vanilla_gd", "noise must be none"));
    }
    descend(model, cfg, |theta, _| Ok((model.gradient(theta), 0.0)))
}

/// `mean_j clip(X_j (X_j^T theta - y_j), c) + mu_reg theta`. The ridge term is
/// data-independent, so it is added after clipping.
pub fn clipped_mean_gradient(data: &FeatureDataset, mu_reg: f64, theta: &DVector<f64>, threshold: f64) -> DVector<f64> {
    let mut acc = DVector::zeros(data.dim());
    for j in 0..data.len() {
        acc += clip_to_norm(&data.sample_gradient(j, theta), threshold);
    }
    acc / data.len() as f64 + theta * mu_reg
}

/// Per-sample clipped gradient descent with Gaussian noise on the mean.
pub fn clipped_dp_gd(data: &FeatureDataset, mu_reg: f64, cfg: &GdConfig) -> Result<Trajectory> {
    let GradientNoise::ClippedGm { threshold, sigma2 } = cfg.noise else {
        return Err(Error::precondition("clipped_dp_gd", "noise must be clipped_gm"));
    };
    if !(threshold > 0.0) {
        return Err(Error::domain("clipped_dp_gd", format!("threshold > 0 (threshold = {threshold})")));
    }
    let model = build_quadratic(data, mu_reg)?;
    descend(&model, cfg, |theta, rng| {
        let g = clipped_mean_gradient(data, mu_reg, theta, threshold);
        let out = gaussian_mechanism(&g, sigma2, rng)?;
        let power = (&out - &g).norm_squared();
        Ok((out, power))
    })
}

/// Noise variance for the clipped baseline: `alpha c^2 / (eps N^2)`.
pub fn clipped_gm_variance(alpha: f64, threshold: f64, eps: f64, n: usize) -> f64 {
    alpha * threshold * threshold / (eps * (n as f64).powi(2))
}

/// `(1 - tau mu)^t dist0_sq + tau sigma2_total / mu`, with `sigma2_total`
/// the expected total noise power `E|xi|^2`.
pub fn strongly_convex_utility_bound(t: usize, tau: f64, mu: f64, sigma2_total: f64, dist0_sq: f64) -> Result<f64> {
    const OP: &str = "strongly_convex_utility_bound";
    let tm = tau * mu;
    if !(tm > 0.0 && tm < 1.0) {
        return Err(Error::domain(OP, format!("0 < tau mu < 1 (tau mu = {tm})")));
    }
    if !(sigma2_total >= 0.0 && dist0_sq >= 0.0) {
        return Err(Error::domain(OP, "sigma2_total >= 0 and dist0_sq >= 0"));
    }
    Ok((1.0 - tm).powi(t as i32) * dist0_sq + tau * sigma2_total / mu)
}

/// `dist0_sq / (2 tau t) + tau sigma2_total / 2`, a bound on the gap at the
/// averaged iterate.
pub fn convex_utility_bound(t: usize, tau: f64, sigma2_total: f64, dist0_sq: f64) -> Result<f64> {
    const OP: &str = "convex_utility_bound";
    if t == 0 {
        return Err(Error::domain(OP, "t >= 1"));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(OP, format!("tau > 0 (tau = {tau})")));
    }
    if !(sigma2_total >= 0.0 && dist0_sq >= 0.0) {
        return Err(Error::domain(OP, "sigma2_total >= 0 and dist0_sq >= 0"));
    }
    Ok(dist0_sq / (2.0 * tau * t as f64) + tau * sigma2_total / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    /// `1 / ((1 + gamma d) L)`, the form the convergence proof needs.
    Theorem,
    /// `0.5 / max_i lambda_max(A_i)`.
    Experiment,
}

pub fn default_step_size(l: f64, gamma: f64, d: usize, mode: StepMode, lmax_nodes: f64) -> Result<f64> {
    const OP: &str = "default_step_size";
    if !(l > 0.0) {
        return Err(Error::domain(OP, format!("L > 0 (L = {l})")));
    }
    match mode {
        StepMode::Theorem => {
            if !(gamma >= 0.0) {
                return Err(Error::domain(OP, format!("gamma >= 0 (gamma = {gamma})")));
            }
            Ok(1.0 / ((1.0 + gamma * d as f64) * l))
        }
        StepMode::Experiment => {
            if !(lmax_nodes > 0.0) {
                return Err(Error::domain(OP, format!("lmax_nodes > 0 (lmax_nodes = {lmax_nodes})")));
            }
            Ok(0.5 / lmax_nodes)
        }
    }
}

/// `1 / (L + gamma)`, the step size as written in the theorem statement.
/// Kept for comparison; the proof needs the smaller `default_step_size`.
pub fn statement_step_size(l: f64, gamma: f64) -> f64 {
    1.0 / (l + gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn diag_model(diag: &[f64], b: &[f64]) -> QuadraticModel {
        QuadraticModel {
            a: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            b: DVector::from_column_slice(b),
            mu_reg: 0.0,
            n: 1,
            offset: 0.0,
        }
    }

    fn cfg(tau: f64, iters: usize, theta0: &[f64], noise: GradientNoise) -> GdConfig {
        GdConfig {
            tau,
            iters,
            theta0: DVector::from_column_slice(theta0),
            noise,
            seed: 17,
        }
    }

    #[test]
    fn noiseless_contraction() {
        let m = diag_model(&[1.0, 1.0], &[0.0, 0.0]);
        let noise = GradientNoise::Rgm(RgmNoise::new(0.0, 0.0).unwrap());
        let traj = private_gd(&m, &cfg(0.5, 30, &[0.6, 0.8], noise)).unwrap();
        for (t, th) in traj.iterates.iter().enumerate() {
            assert_eq!(th.norm(), 0.5f64.powi(t as i32));
        }
        assert_eq!(traj.len(), 31);
        assert_eq!(traj.noise_power.len(), 30);
    }

    #[test]
    fn noiseless_private_equals_vanilla_bitwise() {
        let m = QuadraticModel {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.7]),
            b: DVector::from_vec(vec![1.0, -0.4]),
            mu_reg: 0.0,
            n: 1,
            offset: 0.0,
        };
        let rgm = GradientNoise::Rgm(RgmNoise::new(0.0, 0.0).unwrap());
        let a = private_gd(&m, &cfg(0.3, 50, &[3.0, -1.0], rgm)).unwrap();
        let b = vanilla_gd(&m, &cfg(0.3, 50, &[3.0, -1.0], GradientNoise::None)).unwrap();
        assert_eq!(a.iterates, b.iterates);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let m = diag_model(&[2.0, 0.5], &[1.0, 1.0]);
        let star = m.optimum().unwrap();
        let traj = vanilla_gd(&m, &cfg(0.4, 10, star.as_slice(), GradientNoise::None)).unwrap();
        assert!(traj.iterates.iter().all(|th| (th - &star).norm() < 1e-15));
    }

    #[test]
    fn vanilla_rate_is_one_minus_tau_mu() {
        // kappa = 4, tau = 1/L
        // theta* = 0 keeps the gradient free of cancellation error
        let m = diag_model(&[0.5, 2.0, 1.0], &[0.0, 0.0, 0.0]);
        let traj = vanilla_gd(&m, &cfg(0.5, 100, &[5.0, -3.0, 2.0], GradientNoise::None)).unwrap();
        for t in 0..100 {
            let (a, b) = (traj.dist_sq_to_opt[t], traj.dist_sq_to_opt[t + 1]);
            // below this the iterate sits at rounding distance from theta*
            if a > 1e-20 {
                assert!(b / a <= 0.75f64.powi(2) + 1e-12, "t={t} a={a} b={b}");
            }
        }
    }

    #[test]
    fn requires_matching_noise_kind() {
        let m = diag_model(&[1.0], &[0.0]);
        assert!(vanilla_gd(&m, &cfg(0.1, 1, &[1.0], GradientNoise::Rgm(RgmNoise::new(0.0, 1.0).unwrap()))).is_err());
        assert!(private_gd(&m, &cfg(0.1, 1, &[1.0], GradientNoise::None)).is_err());
        assert!(vanilla_gd(&m, &cfg(0.1, 1, &[1.0, 2.0], GradientNoise::None)).is_err());
        assert!(vanilla_gd(&m, &cfg(0.0, 1, &[1.0], GradientNoise::None)).is_err());
    }

    #[test]
    fn clipped_with_infinite_threshold_is_vanilla() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 0.2, 2.0, 0.3]);
        let data = FeatureDataset::new(x, DVector::from_vec(vec![1.0, -1.0, 0.5])).unwrap();
        let m = build_quadratic(&data, 0.1).unwrap();
        let noise = GradientNoise::ClippedGm {
            threshold: f64::INFINITY,
            sigma2: 0.0,
        };
        let a = clipped_dp_gd(&data, 0.1, &cfg(0.2, 40, &[0.0, 0.0], noise)).unwrap();
        let b = vanilla_gd(&m, &cfg(0.2, 40, &[0.0, 0.0], GradientNoise::None)).unwrap();
        for (p, q) in a.iterates.iter().zip(&b.iterates) {
            assert!((p - q).norm() <= 1e-12 * (1.0 + q.norm()));
        }
    }

    #[test]
    fn clipped_step_hand_oracle() {
        let x = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 1.0, 0.0, 4.0, 1.0]);
        let data = FeatureDataset::new(x, DVector::from_vec(vec![1.0, 2.0, -1.0])).unwrap();
        let theta = DVector::zeros(2);
        // per-sample gradients at 0: -y_j X_j = (-3,0), (0,-8), (1,1); all norms > 0.5
        let c = 0.5;
        let units = [
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::from_vec(vec![0.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt(),
        ];
        let expect = (&units[0] + &units[1] + &units[2]) * (c / 3.0);
        let got = clipped_mean_gradient(&data, 0.0, &theta, c);
        assert!((got - expect).norm() < 1e-15);
    }

    #[test]
    fn bounds_closed_forms() {
        assert_eq!(strongly_convex_utility_bound(0, 0.1, 0.5, 2.0, 3.0).unwrap(), 3.0 + 0.1 * 2.0 / 0.5);
        assert!(strongly_convex_utility_bound(100_000, 0.1, 0.5, 0.0, 3.0).unwrap() < 1e-300);
        assert!(strongly_convex_utility_bound(1, 2.0, 0.5, 0.0, 1.0).is_err());
        assert_eq!(convex_utility_bound(1, 0.25, 4.0, 2.0).unwrap(), 2.0 / 0.5 + 0.5);
        assert!(convex_utility_bound(0, 0.25, 4.0, 2.0).is_err());
    }

    #[test]
    fn step_sizes() {
        assert_eq!(default_step_size(2.0, 0.0, 5, StepMode::Theorem, 0.0).unwrap(), 0.5);
        assert_eq!(default_step_size(2.0, 0.1, 10, StepMode::Theorem, 0.0).unwrap(), 0.25);
        assert_eq!(default_step_size(1.0, 0.0, 1, StepMode::Experiment, 2.0).unwrap(), 0.25);
        assert!(default_step_size(1.0, 0.0, 1, StepMode::Experiment, 0.0).is_err());
        assert!(statement_step_size(2.0, 1.0) > default_step_size(2.0, 1.0, 1, StepMode::Theorem, 0.0).unwrap());
    }

    #[test]
    fn convex_rank_deficient_noiseless() {
        let m = diag_model(&[1.0, 0.0], &[1.0, 0.0]);
        let tau = 0.5;
        let traj = vanilla_gd(&m, &cfg(tau, 200, &[4.0, 7.0], GradientNoise::None)).unwrap();
        let d0 = traj.dist_sq_to_opt[0];
        for t in 1..=200 {
            assert!(traj.avg_function_gap[t] <= convex_utility_bound(t, tau, 0.0, d0).unwrap() + 1e-12);
        }
        assert!((traj.iterates[200][1] - 7.0).abs() < 1e-15);
    }
}

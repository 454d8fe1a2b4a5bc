//! Closed-form privacy accounting for the Relative Gaussian Mechanism (RGM).
//!
//! A query satisfies relative L2 sensitivity `(eta, r_rel)` when for all
//! neighbouring inputs `x ~ y`
//!
//! ```text
//! |R(x) - R(y)|^2 <= eta^2 * min(|R(x)|^2, |R(y)|^2) + r_rel^2
//! ```
//!
//! and the RGM releases `R(x) + N(0, (gamma |R(x)|^2 + sigma2) I_d)`.
//! Everything in here is a pure function of its arguments.
//!
//! `eta = 0` is the absolute-sensitivity case; it is routed to classical
//! Gaussian-mechanism accounting instead of the RGM formulas, which divide by
//! `eta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(eta, r_rel)` pair of a relative L2 sensitivity bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeSensitivity {
    pub eta: f64,
    pub r_rel: f64,
}

impl RelativeSensitivity {
    pub fn new(eta: f64, r_rel: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::domain(
                "RelativeSensitivity",
                format!("eta >= 0 (eta = {eta})"),
            ));
        }
        if !(r_rel.is_finite() && r_rel >= 0.0) {
            return Err(Error::domain(
                "RelativeSensitivity",
                format!("r_rel >= 0 (r_rel = {r_rel})"),
            ));
        }
        Ok(Self { eta, r_rel })
    }

    pub fn is_absolute(&self) -> bool {
        self.eta == 0.0
    }
}

/// Per-coordinate noise parameters: variance is `gamma * |R(x)|^2 + sigma2`.
///
/// `gamma = 0` is accepted and gives back the plain Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgmNoise {
    pub gamma: f64,
    pub sigma2: f64,
}

impl RgmNoise {
    pub fn new(gamma: f64, sigma2: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::domain("RgmNoise", format!("gamma >= 0 (gamma = {gamma})")));
        }
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::domain(
                "RgmNoise",
                format!("sigma2 >= 0 (sigma2 = {sigma2})"),
            ));
        }
        Ok(Self { gamma, sigma2 })
    }

    /// Per-coordinate variance used for an output of squared norm `norm_sq`.
    pub fn variance(&self, norm_sq: f64) -> f64 {
        self.gamma * norm_sq + self.sigma2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpPoint {
    pub alpha: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpPoint {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpPoint {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::domain("DpPoint", format!("epsilon >= 0 (epsilon = {epsilon})")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::domain("DpPoint", format!("0 < delta <= 1 (delta = {delta})")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Truncated concentrated DP pair: Renyi divergence `<= rho * alpha` for all `alpha` in `(1, omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcdpPoint {
    pub rho: f64,
    pub omega: f64,
}

fn require_eta_positive(op: &'static str, sens: &RelativeSensitivity) -> Result<()> {
    if sens.eta > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("eta > 0 (eta = {})", sens.eta)))
    }
}

fn require_gamma_positive(op: &'static str, gamma: f64) -> Result<()> {
    if gamma > 0.0 && !gamma.is_nan() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("gamma > 0 (gamma = {gamma})")))
    }
}

fn require_dim(op: &'static str, d: usize) -> Result<()> {
    if d >= 1 {
        Ok(())
    } else {
        Err(Error::domain(op, "d >= 1 (d = 0)"))
    }
}

fn require_delta_open(op: &'static str, delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(op, format!("0 < delta < 1 (delta = {delta})")))
    }
}

/// Largest admissible Renyi order (exclusive): `(1+eta)^2 / (eta (2+eta))`.
pub fn alpha_max(sens: &RelativeSensitivity) -> Result<f64> {
    require_eta_positive("alpha_max", sens)?;
    let eta = sens.eta;
    Ok((1.0 + eta).powi(2) / (eta * (2.0 + eta)))
}

fn require_alpha(op: &'static str, sens: &RelativeSensitivity, alpha: f64) -> Result<()> {
    if !(alpha > 1.0) {
        return Err(Error::domain(op, format!("alpha > 1 (alpha = {alpha})")));
    }
    if sens.eta > 0.0 {
        let amax = alpha_max(sens)?;
        if !(alpha < amax) {
            return Err(Error::domain(
                op,
                format!("alpha < alpha_max (alpha = {alpha}, alpha_max = {amax}, eta = {})", sens.eta),
            ));
        }
    }
    Ok(())
}

/// Smallest baseline variance admitted by the RGM guarantee:
/// `gamma eta^-2 (1 - eta (alpha - 1)) r_rel^2`.
///
/// For `eta = 0` this is `+inf` unless `r_rel = 0` (no finite baseline makes an
/// output-scaled mechanism private under a purely absolute bound).
pub fn min_baseline_variance(sens: &RelativeSensitivity, gamma: f64, alpha: f64) -> Result<f64> {
    require_gamma_positive("min_baseline_variance", gamma)?;
    require_alpha("min_baseline_variance", sens, alpha)?;
    if sens.r_rel == 0.0 {
        return Ok(0.0);
    }
    if sens.is_absolute() {
        return Ok(f64::INFINITY);
    }
    let eta = sens.eta;
    Ok(gamma / (eta * eta) * (1.0 - eta * (alpha - 1.0)) * sens.r_rel * sens.r_rel)
}

/// The weaker baseline requirement under which the noise-scale ratio of two
/// neighbouring outputs stays within `[(1+eta)^-2, (1+eta)^2]`.
pub fn ratio_lemma_variance(sens: &RelativeSensitivity, gamma: f64) -> Result<f64> {
    require_eta_positive("ratio_lemma_variance", sens)?;
    let eta = sens.eta;
    Ok(gamma * (1.0 + 1.0 / eta) / (2.0 * eta + eta * eta) * sens.r_rel * sens.r_rel)
}

/// `eta^2 (2+eta)^2 (1+eta)^2`, the per-dimension privacy loss of scaling noise by the output norm.
fn dimension_loss(eta: f64) -> f64 {
    let a = (2.0 + eta) * (1.0 + eta);
    eta * eta * a * a
}

/// RDP epsilon written with `1/gamma` so the `gamma -> inf` limit is a plain evaluation.
fn rgm_epsilon_raw(eta: f64, inv_gamma: f64, alpha: f64, d: usize) -> f64 {
    let denom = 1.0 - eta * (alpha - 1.0) * (2.0 + eta);
    alpha / 2.0 * (eta * eta * inv_gamma + d as f64 * dimension_loss(eta)) / denom
}

/// Classical Gaussian-mechanism RDP: `alpha r_abs^2 / (2 sigma2)`.
pub fn gm_rdp_epsilon(r_abs: f64, sigma2: f64, alpha: f64) -> Result<RdpPoint> {
    if !(alpha > 1.0) {
        return Err(Error::domain("gm_rdp_epsilon", format!("alpha > 1 (alpha = {alpha})")));
    }
    if !(sigma2 >= 0.0) || !(r_abs >= 0.0) {
        return Err(Error::domain(
            "gm_rdp_epsilon",
            format!("sigma2 >= 0 and r_abs >= 0 (sigma2 = {sigma2}, r_abs = {r_abs})"),
        ));
    }
    let epsilon = if r_abs == 0.0 {
        0.0
    } else if sigma2 == 0.0 {
        return Err(Error::domain(
            "gm_rdp_epsilon",
            format!("sigma2 > 0 when r_abs > 0 (r_abs = {r_abs})"),
        ));
    } else {
        alpha * r_abs * r_abs / (2.0 * sigma2)
    };
    Ok(RdpPoint { alpha, epsilon })
}

/// RDP guarantee of the RGM with `sigma2 >= min_baseline_variance`:
///
/// ```text
/// eps = (alpha eta^2 / 2 gamma) (1 + gamma d (2+eta)^2 (1+eta)^2) / (1 - eta (alpha-1) (2+eta))
/// ```
///
/// With `eta = 0` the calibrated baseline is unbounded (or the query is
/// constant), and the Gaussian-mechanism route gives `eps = 0`.
pub fn rgm_rdp_epsilon(
    sens: &RelativeSensitivity,
    gamma: f64,
    alpha: f64,
    d: usize,
) -> Result<RdpPoint> {
    require_gamma_positive("rgm_rdp_epsilon", gamma)?;
    require_dim("rgm_rdp_epsilon", d)?;
    require_alpha("rgm_rdp_epsilon", sens, alpha)?;
    if sens.is_absolute() {
        let sigma2 = min_baseline_variance(sens, gamma, alpha)?;
        if sens.r_rel == 0.0 {
            return Ok(RdpPoint { alpha, epsilon: 0.0 });
        }
        return gm_rdp_epsilon(sens.r_rel, sigma2, alpha);
    }
    Ok(RdpPoint {
        alpha,
        epsilon: rgm_epsilon_raw(sens.eta, 1.0 / gamma, alpha, d),
    })
}

/// RDP of a concrete noise setting. Absolute sensitivity goes through the
/// Gaussian mechanism; otherwise the baseline must meet `min_baseline_variance`.
pub fn mechanism_rdp_epsilon(
    sens: &RelativeSensitivity,
    noise: &RgmNoise,
    alpha: f64,
    d: usize,
) -> Result<RdpPoint> {
    if sens.is_absolute() {
        return gm_rdp_epsilon(sens.r_rel, noise.sigma2, alpha);
    }
    let needed = min_baseline_variance(sens, noise.gamma, alpha)?;
    if noise.sigma2 < needed * (1.0 - 1e-12) {
        return Err(Error::domain(
            "mechanism_rdp_epsilon",
            format!("sigma2 >= gamma eta^-2 (1 - eta (alpha-1)) r_rel^2 (sigma2 = {}, required = {needed})", noise.sigma2),
        ));
    }
    rgm_rdp_epsilon(sens, noise.gamma, alpha, d)
}

/// RDP to (eps, delta)-DP: `eps + log(1/delta) / (alpha - 1)`.
pub fn rdp_to_dp(point: &RdpPoint, delta: f64) -> Result<DpPoint> {
    require_delta_open("rdp_to_dp", delta)?;
    if !(point.alpha > 1.0) {
        return Err(Error::domain("rdp_to_dp", format!("alpha > 1 (alpha = {})", point.alpha)));
    }
    Ok(DpPoint {
        epsilon: point.epsilon + (1.0 / delta).ln() / (point.alpha - 1.0),
        delta,
    })
}

/// Closed-form (eps, delta)-DP of the RGM: `chi + 2 sqrt(chi log(1/delta))` with
/// `chi = eta^2/gamma + eta^2 (2+eta)^2 (1+eta)^2 d`.
///
/// Valid when `gamma <= 1 / (4 (2+eta)^2 log(1/delta))` or
/// `d >= 4 log(1/delta) / (1+eta)^2`.
pub fn dp_guarantee_closed_form(
    sens: &RelativeSensitivity,
    gamma: f64,
    d: usize,
    delta: f64,
) -> Result<DpPoint> {
    const OP: &str = "dp_guarantee_closed_form";
    require_eta_positive(OP, sens)?;
    require_gamma_positive(OP, gamma)?;
    require_dim(OP, d)?;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::domain(OP, format!("0 < delta <= 1 (delta = {delta})")));
    }
    let eta = sens.eta;
    let log_inv_delta = (1.0 / delta).ln();
    let gamma_cap = 1.0 / (4.0 * (2.0 + eta).powi(2) * log_inv_delta);
    let d_floor = 4.0 * log_inv_delta / (1.0 + eta).powi(2);
    if !(gamma <= gamma_cap || d as f64 >= d_floor) {
        return Err(Error::precondition(
            OP,
            format!(
                "need gamma <= 1/(4 (2+eta)^2 log(1/delta)) = {gamma_cap} (gamma = {gamma}) \
                 or d >= 4 log(1/delta)/(1+eta)^2 = {d_floor} (d = {d})"
            ),
        ));
    }
    let chi = eta * eta / gamma + dimension_loss(eta) * d as f64;
    Ok(DpPoint {
        epsilon: chi + 2.0 * (chi * log_inv_delta).sqrt(),
        delta,
    })
}

/// Minimises a unimodal function on `[lo, hi]` by golden-section search,
/// stopping once the bracket is narrower than `rel_tol` relative to its midpoint.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, rel_tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut e = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fe = f(e);
    for _ in 0..400 {
        if (b - a) <= rel_tol * 0.5 * (a.abs() + b.abs()) {
            break;
        }
        if fc <= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + inv_phi * (b - a);
            fe = f(e);
        }
    }
    if fc <= fe {
        (c, fc)
    } else {
        (e, fe)
    }
}

/// Result of minimising the Mironov conversion over the Renyi order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaOptimum {
    pub alpha: f64,
    pub rdp: RdpPoint,
    pub dp: DpPoint,
}

/// Bracket used for the order search: strictly inside `(1, alpha_max)`.
fn alpha_bracket(op: &'static str, sens: &RelativeSensitivity) -> Result<(f64, f64)> {
    let amax = alpha_max(sens)?;
    let (lo, hi) = (1.0 + 1e-9, amax - 1e-9);
    if !(hi > lo) {
        return Err(Error::domain(
            op,
            format!("non-empty alpha interval (1, alpha_max) (alpha_max = {amax})"),
        ));
    }
    Ok((lo, hi))
}

fn optimize_alpha_inv_gamma(
    op: &'static str,
    sens: &RelativeSensitivity,
    inv_gamma: f64,
    d: usize,
    delta: f64,
) -> Result<AlphaOptimum> {
    require_eta_positive(op, sens)?;
    require_dim(op, d)?;
    require_delta_open(op, delta)?;
    let (lo, hi) = alpha_bracket(op, sens)?;
    let log_inv_delta = (1.0 / delta).ln();
    let eta = sens.eta;
    let objective = |alpha: f64| rgm_epsilon_raw(eta, inv_gamma, alpha, d) + log_inv_delta / (alpha - 1.0);
    let (alpha, _) = golden_section_min(objective, lo, hi, 1e-9);
    let rdp = RdpPoint {
        alpha,
        epsilon: rgm_epsilon_raw(eta, inv_gamma, alpha, d),
    };
    let dp = rdp_to_dp(&rdp, delta)?;
    Ok(AlphaOptimum { alpha, rdp, dp })
}

/// Numerically optimal Renyi order for the Mironov conversion of the RGM bound.
pub fn optimize_alpha_numeric(
    sens: &RelativeSensitivity,
    gamma: f64,
    d: usize,
    delta: f64,
) -> Result<AlphaOptimum> {
    require_gamma_positive("optimize_alpha_numeric", gamma)?;
    optimize_alpha_inv_gamma("optimize_alpha_numeric", sens, 1.0 / gamma, d, delta)
}

/// Best (eps, delta)-DP achievable by any `gamma`: the `gamma -> inf` limit,
/// which is bounded below by `2 alpha eta^2 d` at every order.
pub fn privacy_floor(sens: &RelativeSensitivity, d: usize, delta: f64) -> Result<AlphaOptimum> {
    optimize_alpha_inv_gamma("privacy_floor", sens, 0.0, d, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GammaCalibration {
    Feasible {
        gamma: f64,
        sigma2: f64,
        alpha: f64,
        achieved: DpPoint,
    },
    /// The target cannot be met by any noise level; `floor` is the attainable infimum.
    Infeasible { floor: f64 },
}

/// Smallest `gamma` (and then smallest admissible `sigma2`) whose
/// order-optimised guarantee meets `target`.
pub fn optimize_gamma(
    sens: &RelativeSensitivity,
    d: usize,
    target: &DpPoint,
) -> Result<GammaCalibration> {
    const OP: &str = "optimize_gamma";
    let floor = privacy_floor(sens, d, target.delta)?;
    if !(target.epsilon > floor.dp.epsilon) {
        return Ok(GammaCalibration::Infeasible {
            floor: floor.dp.epsilon,
        });
    }
    let eps_at = |gamma: f64| -> Result<f64> {
        Ok(optimize_alpha_numeric(sens, gamma, d, target.delta)?.dp.epsilon)
    };
    // eps is decreasing in gamma, tends to +inf as gamma -> 0 and to the floor as gamma -> inf.
    let mut hi = 1.0;
    while eps_at(hi)? > target.epsilon {
        hi *= 10.0;
        if hi > 1e300 {
            return Ok(GammaCalibration::Infeasible {
                floor: floor.dp.epsilon,
            });
        }
    }
    let mut lo = hi;
    while eps_at(lo)? <= target.epsilon {
        lo /= 10.0;
        if lo < 1e-300 {
            return Err(Error::domain(OP, "target reachable by vanishing gamma"));
        }
    }
    for _ in 0..200 {
        if hi / lo <= 1.0 + 1e-12 {
            break;
        }
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let opt = optimize_alpha_numeric(sens, hi, d, target.delta)?;
    let sigma2 = min_baseline_variance(sens, hi, opt.alpha)?;
    Ok(GammaCalibration::Feasible {
        gamma: hi,
        sigma2,
        alpha: opt.alpha,
        achieved: opt.dp,
    })
}

/// Noise matching local-sensitivity calibration at target `eps_star`:
/// `gamma = alpha eta^2 / (2 eps_star)`, `sigma2 = gamma eta^-2 r_rel^2`.
pub fn gamma_for_target(sens: &RelativeSensitivity, alpha: f64, eps_star: f64) -> Result<RgmNoise> {
    const OP: &str = "gamma_for_target";
    require_eta_positive(OP, sens)?;
    if !(eps_star > 0.0) {
        return Err(Error::domain(OP, format!("eps_star > 0 (eps_star = {eps_star})")));
    }
    require_alpha(OP, sens, alpha)?;
    let eta2 = sens.eta * sens.eta;
    let gamma = alpha * eta2 / (2.0 * eps_star);
    let sigma2 = gamma / eta2 * sens.r_rel * sens.r_rel;
    Ok(RgmNoise { gamma, sigma2 })
}

/// Splits the RDP epsilon obtained under `gamma_for_target` into the inflated
/// target term and the gamma-independent privacy-loss term.
pub fn privacy_loss_decomposition(
    sens: &RelativeSensitivity,
    alpha: f64,
    eps_star: f64,
    d: usize,
) -> Result<(f64, f64)> {
    require_eta_positive("privacy_loss_decomposition", sens)?;
    require_alpha("privacy_loss_decomposition", sens, alpha)?;
    let eta = sens.eta;
    let denom = 1.0 - eta * (alpha - 1.0) * (2.0 + eta);
    Ok((
        eps_star / denom,
        alpha * d as f64 * dimension_loss(eta) / (2.0 * denom),
    ))
}

/// tCDP form of the RGM guarantee:
/// `(eta^2 [1/gamma + d (2+eta)^2 (1+eta)^2], 1 + 1/(2 eta (2+eta)))`.
pub fn tcdp_params(sens: &RelativeSensitivity, gamma: f64, d: usize) -> Result<TcdpPoint> {
    require_eta_positive("tcdp_params", sens)?;
    require_gamma_positive("tcdp_params", gamma)?;
    require_dim("tcdp_params", d)?;
    let eta = sens.eta;
    Ok(TcdpPoint {
        rho: eta * eta / gamma + d as f64 * dimension_loss(eta),
        omega: 1.0 + 1.0 / (2.0 * eta * (2.0 + eta)),
    })
}

/// Alternative tCDP pair `(eta^2/gamma + eta^2 d (2+eta)^2 / 2, 1 + 1/(2 eta (2+eta)))`,
/// the form used when comparing against Gaussian smooth sensitivity.
pub fn tcdp_params_compact(sens: &RelativeSensitivity, gamma: f64, d: usize) -> Result<TcdpPoint> {
    require_eta_positive("tcdp_params_compact", sens)?;
    require_gamma_positive("tcdp_params_compact", gamma)?;
    require_dim("tcdp_params_compact", d)?;
    let eta = sens.eta;
    Ok(TcdpPoint {
        rho: eta * eta / gamma + eta * eta * d as f64 * (2.0 + eta).powi(2) / 2.0,
        omega: 1.0 + 1.0 / (2.0 * eta * (2.0 + eta)),
    })
}

/// Gaussian smooth sensitivity guarantee for the same mechanism (scalar outputs):
/// `(4 eta^2 + eta^2/gamma, 1/(4 eta))`.
pub fn gss_tcdp_params(sens: &RelativeSensitivity, gamma: f64) -> Result<TcdpPoint> {
    require_eta_positive("gss_tcdp_params", sens)?;
    require_gamma_positive("gss_tcdp_params", gamma)?;
    let eta = sens.eta;
    Ok(TcdpPoint {
        rho: 4.0 * eta * eta + eta * eta / gamma,
        omega: 1.0 / (4.0 * eta),
    })
}

/// Exact Renyi divergence `D_alpha(P || Q)` between `P = N(mu1, sigma1_sq I_d)` and
/// `Q = N(mu2, sigma2_sq I_d)`, given `mu_dist = |mu1 - mu2|`.
pub fn gaussian_renyi_divergence(
    mu_dist: f64,
    sigma1_sq: f64,
    sigma2_sq: f64,
    alpha: f64,
    d: usize,
) -> Result<f64> {
    const OP: &str = "gaussian_renyi_divergence";
    if !(alpha > 1.0) {
        return Err(Error::domain(OP, format!("alpha > 1 (alpha = {alpha})")));
    }
    if !(sigma1_sq > 0.0 && sigma2_sq > 0.0) {
        return Err(Error::domain(
            OP,
            format!("sigma1_sq > 0 and sigma2_sq > 0 (sigma1_sq = {sigma1_sq}, sigma2_sq = {sigma2_sq})"),
        ));
    }
    let combined = alpha * sigma2_sq + (1.0 - alpha) * sigma1_sq;
    if !(combined > 0.0) {
        return Err(Error::domain(
            OP,
            format!(
                "alpha sigma2_sq + (1-alpha) sigma1_sq > 0 (= {combined}; alpha = {alpha}, sigma1_sq = {sigma1_sq}, sigma2_sq = {sigma2_sq})"
            ),
        ));
    }
    let mean_term = alpha * mu_dist * mu_dist / (2.0 * combined);
    // log(s1^(1-a) s2^a / sqrt(a s2^2 + (1-a) s1^2)) = (a/2) log1p(u) - (1/2) log1p(a u), u = s2^2/s1^2 - 1
    let u = (sigma2_sq - sigma1_sq) / sigma1_sq;
    let log_term = 0.5 * alpha * u.ln_1p() - 0.5 * (alpha * u).ln_1p();
    Ok(mean_term + d as f64 / (alpha - 1.0) * log_term)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRatioCheck {
    pub lower: f64,
    pub upper: f64,
    pub ratio: f64,
    pub holds: bool,
}

/// Checks that `(gamma |R(x)|^2 + sigma2) / (gamma |R(y)|^2 + sigma2)` lies in
/// `[(1+eta)^-2, (1+eta)^2]`. Meant as a test predicate on neighbouring pairs.
pub fn noise_ratio_bounds(
    sens: &RelativeSensitivity,
    noise: &RgmNoise,
    norm_x_sq: f64,
    norm_y_sq: f64,
) -> Result<NoiseRatioCheck> {
    const OP: &str = "noise_ratio_bounds";
    let needed = ratio_lemma_variance(sens, noise.gamma)?;
    if noise.sigma2 < needed * (1.0 - 1e-12) {
        return Err(Error::precondition(
            OP,
            format!(
                "sigma2 >= gamma (1 + 1/eta) / (2 eta + eta^2) r_rel^2 (sigma2 = {}, required = {needed})",
                noise.sigma2
            ),
        ));
    }
    let upper = (1.0 + sens.eta).powi(2);
    let lower = 1.0 / upper;
    let num = noise.variance(norm_x_sq);
    let den = noise.variance(norm_y_sq);
    let ratio = if num == den { 1.0 } else { num / den };
    let slack = 1e-12;
    let holds = ratio >= lower * (1.0 - slack) && ratio <= upper * (1.0 + slack);
    Ok(NoiseRatioCheck {
        lower,
        upper,
        ratio,
        holds,
    })
}

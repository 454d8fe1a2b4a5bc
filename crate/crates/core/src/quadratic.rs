//! Ridge-regression objectives and certification of their gradients'
//! relative sensitivity.
//!
//! The pipeline is: clip features into an ellipsoid `(C, R_c)`, build the
//! regularised covariance `A~`, lower-bound the number of records that must
//! change before `A~ >= rho C` can fail (`delta_plus`), and run a
//! propose-test-release check on that margin with Laplace noise. On
//! acceptance `eta^2 = 6 kappa R_c^4 / (rho^2 n^2)`.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::accountant::RelativeSensitivity;
use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::linalg::{check_square, condition_number, spd_solve, sym_extreme_eigenvalues};
use crate::mechanisms::{laplace_sample, SeededRng};

/// `f(theta) = 1/2 theta^T A theta - b^T theta + offset`, gradient `A theta - b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub mu_reg: f64,
    pub n: usize,
    /// `(1/2n) sum y_i^2`, so that `value` is the actual ridge loss.
    pub offset: f64,
}

impl QuadraticModel {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * theta - &self.b
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.a * theta)) - self.b.dot(theta) + self.offset
    }

    /// Unique minimiser `A^-1 b` (requires `A` positive definite).
    pub fn optimum(&self) -> Result<DVector<f64>> {
        spd_solve("QuadraticModel::optimum", &self.a, &self.b)
    }

    /// Minimiser closest to `theta0`: `A^+ b + (I - A^+ A) theta0`. Works for
    /// rank-deficient `A` as long as `b` lies in its range.
    pub fn nearest_minimizer(&self, theta0: &DVector<f64>) -> DVector<f64> {
        let eig = SymmetricEigen::new(self.a.clone());
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let mut out = DVector::zeros(self.dim());
        for k in 0..self.dim() {
            let q = eig.eigenvectors.column(k);
            let lam = eig.eigenvalues[k];
            if lam > 1e-12 * scale {
                out += q * (q.dot(&self.b) / lam);
            } else {
                out += q * q.dot(theta0);
            }
        }
        out
    }

    /// Cholesky solution when `A` is positive definite, otherwise the
    /// minimiser nearest to `theta0`.
    pub fn reference_minimizer(&self, theta0: &DVector<f64>) -> DVector<f64> {
        self.optimum().unwrap_or_else(|_| self.nearest_minimizer(theta0))
    }

    pub fn eigen_bounds(&self) -> (f64, f64) {
        sym_extreme_eigenvalues(&self.a)
    }
}

/// `A = (1/n) X X^T + mu_reg I`, `b = (1/n) X y`.
pub fn build_quadratic(data: &FeatureDataset, mu_reg: f64) -> Result<QuadraticModel> {
    data.require_nonempty()?;
    if !(mu_reg >= 0.0 && mu_reg.is_finite()) {
        return Err(Error::domain("build_quadratic", format!("mu_reg >= 0 (mu_reg = {mu_reg})")));
    }
    let n = data.len();
    let inv_n = 1.0 / n as f64;
    let mut a = &data.x * data.x.transpose() * inv_n;
    for i in 0..data.dim() {
        a[(i, i)] += mu_reg;
    }
    // symmetrise away rounding asymmetry
    let a = (&a + a.transpose()) * 0.5;
    let b = &data.x * &data.y * inv_n;
    let offset = 0.5 * inv_n * data.y.norm_squared();
    Ok(QuadraticModel {
        a,
        b,
        mu_reg,
        n,
        offset,
    })
}

/// `|x0|^2 x0^T A^-2 x0`, i.e. `|x0 x0^T A^-1|^2` in spectral norm.
pub fn relative_term(x0: &DVector<f64>, a: &DMatrix<f64>) -> Result<f64> {
    check_square("relative_term", a, x0.len())?;
    let z = spd_solve("relative_term", a, x0)?;
    Ok(x0.norm_squared() * z.norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// `|X|^2 X^T C^-2 X <= R_c^4`
    Quartic,
    /// `X^T C^-1 X <= R_c^2`
    Ellipsoid,
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipMode::Quartic => f.write_str("quartic"),
            ClipMode::Ellipsoid => f.write_str("ellipsoid"),
        }
    }
}

/// Clipping ellipsoid `(C, R_c)` with `C` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct ClipShape {
    c: DMatrix<f64>,
    r_c: f64,
    chol: Cholesky<f64, Dyn>,
}

impl ClipShape {
    pub fn new(c: DMatrix<f64>, r_c: f64) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::DimensionMismatch {
                op: "ClipShape::new",
                expected: c.nrows(),
                got: c.ncols(),
            });
        }
        if !(r_c > 0.0 && r_c.is_finite()) {
            return Err(Error::domain("ClipShape::new", format!("R_c > 0 (R_c = {r_c})")));
        }
        let asym = (&c - c.transpose()).amax();
        if asym > 1e-10 * c.amax().max(1.0) {
            return Err(Error::domain("ClipShape::new", "C symmetric"));
        }
        let chol = c
            .clone()
            .cholesky()
            .ok_or_else(|| Error::domain("ClipShape::new", "C positive definite"))?;
        Ok(Self { c, r_c, chol })
    }

    pub fn identity(d: usize, r_c: f64) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), r_c)
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn r_c(&self) -> f64 {
        self.r_c
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.c)
    }

    /// Radius-like score compared against `R_c`; linear in the scale of `x`.
    pub fn score(&self, x: &DVector<f64>, mode: ClipMode) -> f64 {
        let cinv_x = self.chol.solve(x);
        match mode {
            ClipMode::Quartic => (x.norm_squared() * cinv_x.norm_squared()).sqrt().sqrt(),
            ClipMode::Ellipsoid => x.dot(&cinv_x).max(0.0).sqrt(),
        }
    }
}

/// Shrinks every feature column with score above `R_c` back onto the boundary.
/// Labels are untouched.
pub fn feature_clip(data: &FeatureDataset, shape: &ClipShape, mode: ClipMode) -> Result<FeatureDataset> {
    if shape.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            op: "feature_clip",
            expected: data.dim(),
            got: shape.dim(),
        });
    }
    let r_c = shape.r_c();
    let mut out = data.clone();
    for i in 0..data.len() {
        let xi = data.column(i);
        let s = shape.score(&xi, mode);
        if s > r_c {
            out.x.set_column(i, &(xi * (r_c / s)));
        }
    }
    Ok(out)
}

/// Shrinks labels so that every `|X_j y_j| <= b_clip`.
pub fn clip_labels(data: &FeatureDataset, b_clip: f64) -> FeatureDataset {
    let mut out = data.clone();
    for j in 0..data.len() {
        let m = data.x.column(j).norm() * data.y[j].abs();
        if m > b_clip {
            out.y[j] *= b_clip / m;
        }
    }
    out
}

/// `eta = sqrt(6 kappa R_c^4 / (rho^2 n^2))`. `kappa = 1` for quartic clipping,
/// `cond(C)` for ellipsoid clipping.
pub fn eta_from_clip(r_c: f64, rho: f64, n: usize, kappa: f64) -> f64 {
    let n = n as f64;
    (6.0 * kappa * r_c.powi(4) / (rho * rho * n * n)).sqrt()
}

/// Absolute part of the gradient sensitivity: `eta |b| + 2 B / n`, where
/// `B = b_clip` when labels are clipped (it then covers any replacement
/// record) and otherwise the local `max_j |X_j y_j|`.
pub fn r_rel_bound(model: &QuadraticModel, data: &FeatureDataset, eta: f64, b_clip: f64) -> f64 {
    let max_term = if b_clip.is_finite() {
        b_clip
    } else {
        (0..data.len())
            .map(|j| data.x.column(j).norm() * data.y[j].abs())
            .fold(0.0, f64::max)
    };
    eta * model.b.norm() + 2.0 * max_term / model.n as f64
}

/// Lower bound on the number of record changes needed to break `A~ >= rho C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaPlus {
    Finite(usize),
    /// Even removing every record keeps the condition: no removal-based violation.
    Infinite,
}

impl DeltaPlus {
    pub fn as_f64(&self) -> f64 {
        match self {
            DeltaPlus::Finite(k) => *k as f64,
            DeltaPlus::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for DeltaPlus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaPlus::Finite(k) => write!(f, "{k}"),
            DeltaPlus::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for DeltaPlus {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DeltaPlus::Finite(k) => s.serialize_u64(*k as u64),
            DeltaPlus::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaPlus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(DeltaPlus::Finite(k as usize)),
            Raw::Str(s) if s == "inf" => Ok(DeltaPlus::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid delta_plus {s:?}"))),
        }
    }
}

/// Per-record scores `X_i^T (A~ - rho C)^-1 X_i`, or `None` when `A~ - rho C`
/// is not positive semi-definite. Records with mass in the null space of a
/// singular PSD matrix score `+inf`.
pub fn stability_scores(
    data_clipped: &FeatureDataset,
    model: &QuadraticModel,
    shape: &ClipShape,
    rho: f64,
) -> Result<Option<Vec<f64>>> {
    const OP: &str = "delta_plus";
    let d = data_clipped.dim();
    check_square(OP, &model.a, d)?;
    if shape.dim() != d {
        return Err(Error::DimensionMismatch {
            op: OP,
            expected: d,
            got: shape.dim(),
        });
    }
    if !(rho > 0.0) {
        return Err(Error::domain(OP, format!("rho > 0 (rho = {rho})")));
    }
    let m = &model.a - shape.c() * rho;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m.clone());
    let a_norm = sym_extreme_eigenvalues(&model.a).1.abs();
    let tol = 1e-9 * a_norm;
    let lam_min = eig.eigenvalues.min();
    if lam_min < -tol {
        return Ok(None);
    }
    let n = data_clipped.len();
    let scores = if lam_min > tol {
        let chol = m.cholesky().ok_or(Error::Singular { op: OP })?;
        (0..n)
            .map(|i| {
                let xi = data_clipped.column(i);
                xi.dot(&chol.solve(&xi))
            })
            .collect()
    } else {
        (0..n)
            .map(|i| {
                let xi = data_clipped.column(i);
                let xnorm = xi.norm();
                let mut s = 0.0;
                for k in 0..d {
                    let proj = eig.eigenvectors.column(k).dot(&xi);
                    let lam = eig.eigenvalues[k];
                    if lam > tol {
                        s += proj * proj / lam;
                    } else if proj.abs() > 1e-12 * xnorm {
                        return f64::INFINITY;
                    }
                }
                s
            })
            .collect()
    };
    Ok(Some(scores))
}

/// Relative slack on the `sum >= n` comparison. Rounding then errs toward a
/// smaller margin, which only makes the test more conservative.
pub const MARGIN_REL_TOL: f64 = 1e-12;

/// Smallest `k` such that the `k` largest scores sum to at least `n`.
pub fn greedy_margin(scores: &[f64], n: usize) -> DeltaPlus {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let target = n as f64 * (1.0 - MARGIN_REL_TOL);
    let mut acc = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += s;
        if acc >= target {
            return DeltaPlus::Finite(k + 1);
        }
    }
    DeltaPlus::Infinite
}

/// Efficient lower bound on the stability margin of `A~ >= rho C`.
pub fn delta_plus(
    data_clipped: &FeatureDataset,
    model: &QuadraticModel,
    shape: &ClipShape,
    rho: f64,
) -> Result<DeltaPlus> {
    match stability_scores(data_clipped, model, shape, rho)? {
        None => Ok(DeltaPlus::Finite(0)),
        Some(scores) => Ok(greedy_margin(&scores, data_clipped.len())),
    }
}

/// Outcome of one propose-test-release check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtrOutcome {
    pub delta_plus: DeltaPlus,
    #[serde(with = "f64_or_inf")]
    pub noisy_delta: f64,
    pub threshold: f64,
    pub accepted: bool,
    pub eps: f64,
    pub delta: f64,
}

/// JSON has no infinity; encode it as the string `"inf"`.
mod f64_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid number {s:?}"))),
        }
    }
}

/// `noisy = dplus + Lap(1/eps)`; accept iff `noisy > -log(delta)/eps`.
pub fn ptr_test(dplus: DeltaPlus, eps: f64, delta: f64, rng: &mut SeededRng) -> Result<PtrOutcome> {
    const OP: &str = "ptr_test";
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::domain(OP, format!("eps > 0 (eps = {eps})")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(OP, format!("0 < delta < 1 (delta = {delta})")));
    }
    let threshold = -delta.ln() / eps;
    let noisy_delta = match dplus {
        DeltaPlus::Infinite => f64::INFINITY,
        DeltaPlus::Finite(k) => k as f64 + laplace_sample(1.0 / eps, rng)?,
    };
    Ok(PtrOutcome {
        delta_plus: dplus,
        noisy_delta,
        threshold,
        accepted: noisy_delta > threshold,
        eps,
        delta,
    })
}

/// `E[min(Q, R_c^2)] / (2d)` for `Q ~ chi^2(d)`, via
/// `E[Q 1{Q <= c}] = d F_{d+2}(c)`.
pub fn gaussian_rho(d: usize, r_c: f64) -> f64 {
    use statrs::function::gamma::{gamma_lr, gamma_ur};
    assert!(d >= 1 && r_c > 0.0);
    if r_c.is_infinite() {
        return 0.5;
    }
    let c = r_c * r_c;
    let df = d as f64;
    let truncated_mean = df * gamma_lr((df + 2.0) / 2.0, c / 2.0);
    let tail = c * gamma_ur(df / 2.0, c / 2.0);
    (truncated_mean + tail) / (2.0 * df)
}

/// Regularisation `4 |Sigma| R_c^2 sqrt(log(2d/nu)/n)` under which Gaussian
/// data concentrates enough for `gaussian_rho` to pass the test.
pub fn gaussian_mu_reg(sigma_norm: f64, r_c: f64, n: usize, nu: f64, d: usize) -> Result<f64> {
    const OP: &str = "gaussian_mu_reg";
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::domain(OP, format!("0 < nu < 1 (nu = {nu})")));
    }
    let log_term = (2.0 * d as f64 / nu).ln();
    let n_min = 4.0 * log_term / 9.0;
    if (n as f64) < n_min {
        return Err(Error::precondition(
            OP,
            format!("n >= 4 log(2d/nu)/9 = {n_min} (n = {n}); minimum n is {}", n_min.ceil()),
        ));
    }
    Ok(4.0 * sigma_norm * r_c * r_c * (log_term / n as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct CertifyParams {
    pub shape: ClipShape,
    pub mode: ClipMode,
    pub rho: f64,
    pub mu_reg: f64,
    pub ptr_eps: f64,
    pub ptr_delta: f64,
    /// Conditioning factor in `eta`; `None` picks 1 (quartic) or `cond(C)` (ellipsoid).
    pub kappa: Option<f64>,
    /// Cap on `|X_j y_j|`, enforced by shrinking labels; `+inf` disables it.
    pub b_clip: f64,
}

impl CertifyParams {
    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(match self.mode {
            ClipMode::Quartic => 1.0,
            ClipMode::Ellipsoid => self.shape.condition_number(),
        })
    }
}

/// Serializable certificate. `eta` and `r_rel` are present only when the test accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_rel: Option<f64>,
    pub rho: f64,
    #[serde(rename = "R_c")]
    pub r_c: f64,
    pub mode: ClipMode,
    pub ptr: PtrOutcome,
    pub seed: u64,
    #[serde(default)]
    pub mu_reg: f64,
    #[serde(default)]
    pub kappa: f64,
    /// `None` stands for no label clipping.
    #[serde(default)]
    pub b_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl Certificate {
    pub fn is_accepted(&self) -> bool {
        self.ptr.accepted && self.eta.is_some() && self.r_rel.is_some()
    }

    pub fn sensitivity(&self) -> Result<RelativeSensitivity> {
        match (self.ptr.accepted, self.eta, self.r_rel) {
            (true, Some(eta), Some(r_rel)) => RelativeSensitivity::new(eta, r_rel),
            _ => Err(Error::RejectedCertificate),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct CertifyOutcome {
    pub certificate: Certificate,
    pub clipped: FeatureDataset,
    pub model: QuadraticModel,
}

/// Clip, build the objective, compute the stability margin and run the test.
/// On rejection the certificate carries only the test outcome.
pub fn certify_relative_sensitivity(
    data: &FeatureDataset,
    params: &CertifyParams,
    rng: &mut SeededRng,
) -> Result<CertifyOutcome> {
    data.require_nonempty()?;
    let mut clipped = feature_clip(data, &params.shape, params.mode)?;
    if params.b_clip.is_finite() {
        clipped = clip_labels(&clipped, params.b_clip);
    }
    let model = build_quadratic(&clipped, params.mu_reg)?;
    let dplus = delta_plus(&clipped, &model, &params.shape, params.rho)?;
    let ptr = ptr_test(dplus, params.ptr_eps, params.ptr_delta, rng)?;
    let kappa = params.kappa();
    let (eta, r_rel) = if ptr.accepted {
        let eta = eta_from_clip(params.shape.r_c(), params.rho, clipped.len(), kappa);
        (Some(eta), Some(r_rel_bound(&model, &clipped, eta, params.b_clip)))
    } else {
        (None, None)
    };
    let certificate = Certificate {
        eta,
        r_rel,
        rho: params.rho,
        r_c: params.shape.r_c(),
        mode: params.mode,
        ptr,
        seed: rng.seed(),
        mu_reg: params.mu_reg,
        kappa,
        b_clip: params.b_clip.is_finite().then_some(params.b_clip),
        note: None,
    };
    Ok(CertifyOutcome {
        certificate,
        clipped,
        model,
    })
}

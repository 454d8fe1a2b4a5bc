//! LibSVM text I/O and synthetic dataset generators.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::mechanisms::SeededRng;
use crate::quadratic::QuadraticModel;

pub fn parse_libsvm(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    parse_libsvm_reader(std::fs::File::open(path)?)
}

/// Parses `<label> <idx>:<val> ...` lines with 1-based, strictly ascending
/// indices. Text after `#` is a comment; blank lines are skipped. The
/// dimension is the largest index seen.
pub fn parse_libsvm_reader(reader: impl Read) -> Result<FeatureDataset> {
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut d = 0usize;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(format!("invalid label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(perr(format!("non-finite label {label_tok:?}")));
        }
        let mut feats = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("expected <index>:<value>, found {tok:?}")))?;
            let idx: usize = i.parse().map_err(|_| perr(format!("invalid index {i:?}")))?;
            if idx == 0 {
                return Err(perr("indices are 1-based; found 0".into()));
            }
            if idx <= last {
                return Err(perr(format!("indices must be strictly ascending ({idx} after {last})")));
            }
            let val: f64 = v.parse().map_err(|_| perr(format!("invalid value {v:?}")))?;
            if !val.is_finite() {
                return Err(perr(format!("non-finite value {v:?}")));
            }
            last = idx;
            feats.push((idx - 1, val));
        }
        d = d.max(last);
        labels.push(label);
        rows.push(feats);
    }
    let mut x = DMatrix::zeros(d, rows.len());
    for (j, feats) in rows.iter().enumerate() {
        for &(i, v) in feats {
            x[(i, j)] = v;
        }
    }
    FeatureDataset::new(x, DVector::from_vec(labels))
}

/// Writes one line per record, omitting zero features. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_libsvm(data: &FeatureDataset, mut out: impl Write) -> Result<()> {
    let mut line = String::new();
    for j in 0..data.len() {
        line.clear();
        write!(line, "{}", data.y[j]).expect("write to String");
        for i in 0..data.dim() {
            let v = data.x[(i, j)];
            if v != 0.0 {
                write!(line, " {}:{}", i + 1, v).expect("write to String");
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSpec {
    Identity,
    Diagonal { values: Vec<f64> },
    /// Random rotation of eigenvalues spread geometrically over `[1/cond, 1]`.
    RandomSpd { condition_number: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    Gaussian {
        d: usize,
        n: usize,
        sigma: SigmaSpec,
        /// Feature mean; zero when absent.
        #[serde(default)]
        mean: Option<Vec<f64>>,
        /// Regression vector; all ones when absent.
        #[serde(default)]
        theta_true: Option<Vec<f64>>,
        #[serde(default)]
        label_noise: f64,
        /// Replace each label by the sign of its regression value (+1 / -1).
        #[serde(default)]
        binary_labels: bool,
    },
    Orthogonal {
        d: usize,
        n: usize,
        /// Norm of each direction; all ones when empty.
        #[serde(default)]
        scales: Vec<f64>,
    },
    TwoQuadratics {
        alpha_range: (f64, f64),
        beta_range: (f64, f64),
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub seed: u64,
}

fn generator_rng(seed: u64) -> SeededRng {
    SeededRng::derived(seed, "gen", 0, 0)
}

/// Covariance matrix described by a [`SigmaSpec`].
pub fn build_sigma(spec: &SigmaSpec, d: usize, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    const OP: &str = "gen_gaussian";
    match spec {
        SigmaSpec::Identity => Ok(DMatrix::identity(d, d)),
        SigmaSpec::Diagonal { values } => {
            if values.len() != d {
                return Err(Error::DimensionMismatch {
                    op: OP,
                    expected: d,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::domain(OP, "positive diagonal entries"));
            }
            Ok(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
        }
        SigmaSpec::RandomSpd { condition_number } => {
            let k = *condition_number;
            if !(k >= 1.0 && k.is_finite()) {
                return Err(Error::domain(OP, format!("condition_number >= 1 (got {k})")));
            }
            let g = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
            let q = g.qr().q();
            let eig = DVector::from_fn(d, |i, _| {
                if d == 1 {
                    1.0
                } else {
                    k.powf(-(i as f64) / (d - 1) as f64)
                }
            });
            let s = &q * DMatrix::from_diagonal(&eig) * q.transpose();
            Ok((&s + s.transpose()) * 0.5)
        }
    }
}

/// Columns i.i.d. `N(mean, Sigma)`, labels `theta_true^T x + noise`.
pub fn gen_gaussian(spec: &GeneratorSpec) -> Result<FeatureDataset> {
    const OP: &str = "gen_gaussian";
    let GeneratorKind::Gaussian {
        d,
        n,
        sigma,
        mean,
        theta_true,
        label_noise,
        binary_labels,
    } = &spec.kind
    else {
        return Err(Error::precondition(OP, "generator kind must be gaussian"));
    };
    let (d, n) = (*d, *n);
    if d == 0 || n == 0 {
        return Err(Error::domain(OP, "d >= 1 and n >= 1"));
    }
    if !(*label_noise >= 0.0) {
        return Err(Error::domain(OP, "label_noise >= 0"));
    }
    let mut rng = generator_rng(spec.seed);
    let sigma = build_sigma(sigma, d, &mut rng)?;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::domain(OP, "Sigma symmetric positive definite"))?;
    let l = chol.l();
    let vec_or = |v: &Option<Vec<f64>>, default: f64| -> Result<DVector<f64>> {
        match v {
            Some(v) if v.len() != d => Err(Error::DimensionMismatch {
                op: OP,
                expected: d,
                got: v.len(),
            }),
            Some(v) => Ok(DVector::from_column_slice(v)),
            None => Ok(DVector::from_element(d, default)),
        }
    };
    let mean = vec_or(mean, 0.0)?;
    let theta = vec_or(theta_true, 1.0)?;
    let mut x = DMatrix::zeros(d, n);
    let mut y = DVector::zeros(n);
    let sd = label_noise.sqrt();
    for j in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.standard_normal());
        let col = &l * z + &mean;
        let mut label = theta.dot(&col) + sd * rng.standard_normal();
        if *binary_labels {
            label = if label >= 0.0 { 1.0 } else { -1.0 };
        }
        x.set_column(j, &col);
        y[j] = label;
    }
    FeatureDataset::new(x, y)
}

/// `n / d` copies of each scaled basis vector, in seeded order. Labels are 1.
pub fn gen_orthogonal(spec: &GeneratorSpec) -> Result<FeatureDataset> {
    const OP: &str = "gen_orthogonal";
    let GeneratorKind::Orthogonal { d, n, scales } = &spec.kind else {
        return Err(Error::precondition(OP, "generator kind must be orthogonal"));
    };
    let (d, n) = (*d, *n);
    if d == 0 || n == 0 || n % d != 0 {
        return Err(Error::domain(OP, format!("n divisible by d with n, d >= 1 (n = {n}, d = {d})")));
    }
    let scales = if scales.is_empty() { vec![1.0; d] } else { scales.clone() };
    if scales.len() != d {
        return Err(Error::DimensionMismatch {
            op: OP,
            expected: d,
            got: scales.len(),
        });
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::domain(OP, "positive scales"));
    }
    let mut dirs: Vec<usize> = (0..n).map(|j| j % d).collect();
    generator_rng(spec.seed).shuffle(&mut dirs);
    let mut x = DMatrix::zeros(d, n);
    for (j, &k) in dirs.iter().enumerate() {
        x[(k, j)] = scales[k];
    }
    FeatureDataset::new(x, DVector::from_element(n, 1.0))
}

/// Two one-node objectives `f1 = alpha |theta|^2` and `f2 = beta |theta - b|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoQuadratics {
    pub f1: QuadraticModel,
    pub f2: QuadraticModel,
    pub alpha: f64,
    pub beta: f64,
    /// `alpha_min / alpha_max` and `beta_min / beta_max`, as stated for this example.
    pub eta1: f64,
    pub eta2: f64,
    /// `max/min - 1`: the smallest eta for which the gradients `2 alpha theta`
    /// actually satisfy the relative bound over the whole range.
    pub eta1_sound: f64,
    pub eta2_sound: f64,
    pub r_rel: f64,
}

/// Samples `alpha` and `beta` uniformly from their ranges. The relative
/// sensitivity of each gradient is the range ratio, with no absolute part.
pub fn gen_two_quadratics(spec: &GeneratorSpec) -> Result<TwoQuadratics> {
    const OP: &str = "gen_two_quadratics";
    let GeneratorKind::TwoQuadratics {
        alpha_range,
        beta_range,
        b,
    } = &spec.kind
    else {
        return Err(Error::precondition(OP, "generator kind must be two_quadratics"));
    };
    for (lo, hi) in [alpha_range, beta_range] {
        if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::domain(OP, format!("0 < min <= max (got [{lo}, {hi}])")));
        }
    }
    let d = b.len();
    if d == 0 {
        return Err(Error::domain(OP, "b non-empty"));
    }
    let mut rng = generator_rng(spec.seed);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.uniform_open();
    let alpha = draw(*alpha_range);
    let beta = draw(*beta_range);
    let b = DVector::from_column_slice(b);
    let eye = DMatrix::<f64>::identity(d, d);
    // alpha |theta|^2 has Hessian 2 alpha I
    let f1 = QuadraticModel {
        a: &eye * (2.0 * alpha),
        b: DVector::zeros(d),
        mu_reg: 0.0,
        n: 1,
        offset: 0.0,
    };
    let f2 = QuadraticModel {
        a: &eye * (2.0 * beta),
        b: &b * (2.0 * beta),
        mu_reg: 0.0,
        n: 1,
        offset: beta * b.norm_squared(),
    };
    Ok(TwoQuadratics {
        f1,
        f2,
        alpha,
        beta,
        eta1: alpha_range.0 / alpha_range.1,
        eta2: beta_range.0 / beta_range.1,
        eta1_sound: alpha_range.1 / alpha_range.0 - 1.0,
        eta2_sound: beta_range.1 / beta_range.0 - 1.0,
        r_rel: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<FeatureDataset> {
        parse_libsvm_reader(s.as_bytes())
    }

    #[test]
    fn single_line() {
        let d = parse("1 1:0.5 3:-2\n").unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.y.as_slice(), &[1.0]);
        assert_eq!(d.column(0).as_slice(), &[0.5, 0.0, -2.0]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let d = parse("# header\n\n-1 2:1 # trailing\n  \n+1 1:3\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.y.as_slice(), &[-1.0, 1.0]);
        assert_eq!(d.x[(1, 0)], 1.0);
        assert_eq!(d.x[(0, 1)], 3.0);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let d = parse("").unwrap();
        assert!(d.is_empty());
        assert!(matches!(d.require_nonempty(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn malformed_fixtures_report_line() {
        let cases = [
            ("1 1:1\n1 2:2 1:3\n", 2, "ascending"),
            ("1 1:1\n\nx 1:1\n", 3, "label"),
            ("1 0:1\n", 1, "1-based"),
            ("1 1:1 2\n", 1, "<index>:<value>"),
            ("1 1:abc\n", 1, "value"),
            ("1 a:1\n", 1, "index"),
            ("1 1:1 1:2\n", 1, "ascending"),
            ("1 1:nan\n", 1, "non-finite"),
            ("inf 1:1\n", 1, "non-finite"),
        ];
        for (text, line, needle) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, msg }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert!(msg.contains(needle), "{msg} lacks {needle}");
                }
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn orthogonal_construction() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::Orthogonal {
                d: 2,
                n: 4,
                scales: vec![],
            },
            seed: 3,
        };
        let data = gen_orthogonal(&spec).unwrap();
        let mut counts = [0; 2];
        for j in 0..4 {
            let c = data.column(j);
            let k = if c[0] != 0.0 { 0 } else { 1 };
            assert_eq!(c.norm(), 1.0);
            assert_eq!(c[1 - k], 0.0);
            counts[k] += 1;
        }
        assert_eq!(counts, [2, 2]);
        let bad = GeneratorSpec {
            kind: GeneratorKind::Orthogonal {
                d: 3,
                n: 4,
                scales: vec![],
            },
            seed: 0,
        };
        assert!(gen_orthogonal(&bad).is_err());
    }

    #[test]
    fn gaussian_determinism_and_validation() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::Gaussian {
                d: 3,
                n: 20,
                sigma: SigmaSpec::RandomSpd { condition_number: 5.0 },
                mean: None,
                theta_true: None,
                label_noise: 0.1,
                binary_labels: false,
            },
            seed: 9,
        };
        assert_eq!(gen_gaussian(&spec).unwrap(), gen_gaussian(&spec).unwrap());
        let mut bad = spec.clone();
        bad.kind = GeneratorKind::Gaussian {
            d: 2,
            n: 5,
            sigma: SigmaSpec::Diagonal { values: vec![1.0, -1.0] },
            mean: None,
            theta_true: None,
            label_noise: 0.0,
            binary_labels: false,
        };
        assert!(gen_gaussian(&bad).is_err());
    }

    #[test]
    fn random_spd_has_requested_condition() {
        let mut rng = SeededRng::new(1, 1);
        let s = build_sigma(&SigmaSpec::RandomSpd { condition_number: 50.0 }, 4, &mut rng).unwrap();
        let k = crate::linalg::condition_number(&s);
        assert!((k - 50.0).abs() < 1e-8, "{k}");
    }

    #[test]
    fn two_quadratics_midpoint() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::TwoQuadratics {
                alpha_range: (1.0, 1.0),
                beta_range: (1.0, 1.0),
                b: vec![2.0, -6.0],
            },
            seed: 0,
        };
        let tq = gen_two_quadratics(&spec).unwrap();
        assert_eq!(tq.eta1, 1.0);
        assert_eq!(tq.r_rel, 0.0);
        let a = &tq.f1.a + &tq.f2.a;
        let b = &tq.f1.b + &tq.f2.b;
        let star = a.cholesky().unwrap().solve(&b);
        assert!((star - DVector::from_vec(vec![1.0, -3.0])).norm() < 1e-15);
        let theta = DVector::from_vec(vec![0.3, 0.4]);
        // value and gradient agree with beta |theta - b|^2
        let direct = tq.beta * (&theta - DVector::from_vec(vec![2.0, -6.0])).norm_squared();
        assert!((tq.f2.value(&theta) - direct).abs() < 1e-12);
    }

    #[test]
    fn two_quadratics_eta_is_range_ratio() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::TwoQuadratics {
                alpha_range: (0.9, 1.0),
                beta_range: (2.0, 4.0),
                b: vec![1.0],
            },
            seed: 4,
        };
        let tq = gen_two_quadratics(&spec).unwrap();
        assert!((tq.eta1 - 0.9).abs() < 1e-15);
        assert_eq!(tq.eta2, 0.5);
        assert!(tq.alpha >= 0.9 && tq.alpha <= 1.0 && tq.beta >= 2.0 && tq.beta <= 4.0);
        assert_eq!(tq.eta2_sound, 1.0);
        // brute force over the range: |g(a) - g(a')| <= eta_sound |g(a)|
        for i in 0..=20 {
            for k in 0..=20 {
                let a = 2.0 + 0.1 * i as f64;
                let a2 = 2.0 + 0.1 * k as f64;
                assert!((a - a2).abs() <= tq.eta2_sound * a + 1e-12);
            }
        }
    }
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use nalgebra::DVector;
use rgm_core::accountant::{
    alpha_max, dp_guarantee_closed_form, gamma_for_target, gss_tcdp_params, min_baseline_variance,
    optimize_alpha_numeric, optimize_gamma, privacy_floor, rdp_to_dp, rgm_rdp_epsilon, tcdp_params,
    tcdp_params_compact, DpPoint, GammaCalibration, RelativeSensitivity,
};
use rgm_core::data::{gen_gaussian, gen_orthogonal, gen_two_quadratics, parse_libsvm, write_libsvm, GeneratorKind, GeneratorSpec};
use rgm_core::fedsim::{
    experiment_step_size, prepare_nodes, run_federated, split_dataset, Aggregation, EtaConstants, FedConfig,
    MethodSpec, Privatizer, SplitSpec, SplitStrategy,
};
use rgm_core::linalg::sym_extreme_eigenvalues;
use rgm_core::mechanisms::SeededRng;
use rgm_core::optim::{clipped_dp_gd, private_gd, vanilla_gd, GdConfig, GradientNoise, TRAJECTORY_COLUMNS};
use rgm_core::quadratic::{certify_relative_sensitivity, CertifyParams, ClipMode, ClipShape};
use rgm_core::report::write_csv;
use rgm_core::verify::{run_all, VerifyOptions};
use rgm_core::FeatureDataset;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::resolve;
use crate::{AccountArgs, CertifyArgs, CliError, FedsimArgs, GenArgs, TrainArgs, VerifyArgs};

type CliResult = Result<(), CliError>;

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_data(data: &Option<PathBuf>, generator: &Option<GeneratorSpec>) -> Result<FeatureDataset, CliError> {
    match (data, generator) {
        (Some(path), None) => Ok(parse_libsvm(path)?),
        (None, Some(spec)) => match spec.kind {
            GeneratorKind::Gaussian { .. } => Ok(gen_gaussian(spec)?),
            GeneratorKind::Orthogonal { .. } => Ok(gen_orthogonal(spec)?),
            GeneratorKind::TwoQuadratics { .. } => {
                Err(CliError::Usage("two_quadratics does not produce a dataset".into()))
            }
        },
        (Some(_), Some(_)) => Err(CliError::Usage("give either `data` or `generator`, not both".into())),
        (None, None) => Err(CliError::Usage("no input: pass --data or a `generator` in --config".into())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AccountConfig {
    eta: f64,
    #[serde(default)]
    r_rel: f64,
    d: usize,
    delta: f64,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    gamma_mult: Option<f64>,
    #[serde(default)]
    target_eps: Option<f64>,
}

fn row(out: &mut impl Write, name: &str, value: impl std::fmt::Display) -> io::Result<()> {
    writeln!(out, "{name:<34}{value}")
}

fn or_reason<T>(r: rgm_core::Result<T>, f: impl Fn(T) -> String) -> String {
    match r {
        Ok(v) => f(v),
        Err(e) => format!("n/a ({e})"),
    }
}

pub fn account(args: &AccountArgs) -> CliResult {
    let cfg: AccountConfig = resolve(args.config.as_deref(), args)?;
    let sens = RelativeSensitivity::new(cfg.eta, cfg.r_rel)?;
    let gamma = match (cfg.gamma, cfg.gamma_mult) {
        (Some(g), _) => g,
        (None, Some(m)) => m * cfg.eta * cfg.eta,
        (None, None) => return Err(CliError::Usage("need --gamma or --gamma-mult".into())),
    };
    let mut out = io::stdout().lock();
    row(&mut out, "eta", cfg.eta)?;
    row(&mut out, "R_rel", cfg.r_rel)?;
    row(&mut out, "d", cfg.d)?;
    row(&mut out, "delta", cfg.delta)?;
    row(&mut out, "gamma", format!("{gamma:e}"))?;
    row(&mut out, "alpha_max", alpha_max(&sens)?)?;
    row(
        &mut out,
        "closed-form epsilon",
        or_reason(dp_guarantee_closed_form(&sens, gamma, cfg.d, cfg.delta), |p| format!("{:.6}", p.epsilon)),
    )?;
    row(
        &mut out,
        "numeric-alpha epsilon",
        or_reason(optimize_alpha_numeric(&sens, gamma, cfg.d, cfg.delta), |o| {
            format!("{:.6} (alpha = {:.6})", o.dp.epsilon, o.alpha)
        }),
    )?;
    row(
        &mut out,
        "epsilon floor (gamma -> inf)",
        or_reason(privacy_floor(&sens, cfg.d, cfg.delta), |o| format!("{:.6}", o.dp.epsilon)),
    )?;
    let tc = |p: rgm_core::accountant::TcdpPoint| format!("rho = {:.6e}, omega = {:.6}", p.rho, p.omega);
    row(&mut out, "tcdp", or_reason(tcdp_params(&sens, gamma, cfg.d), tc))?;
    row(&mut out, "tcdp (compact)", or_reason(tcdp_params_compact(&sens, gamma, cfg.d), tc))?;
    row(&mut out, "tcdp (gaussian sinh-normal)", or_reason(gss_tcdp_params(&sens, gamma), tc))?;
    if let Some(alpha) = cfg.alpha {
        let rdp = rgm_rdp_epsilon(&sens, gamma, alpha, cfg.d)?;
        row(&mut out, "alpha", alpha)?;
        row(&mut out, "rdp epsilon at alpha", format!("{:.6}", rdp.epsilon))?;
        row(&mut out, "min baseline variance", format!("{:e}", min_baseline_variance(&sens, gamma, alpha)?))?;
        row(&mut out, "dp epsilon at alpha", format!("{:.6}", rdp_to_dp(&rdp, cfg.delta)?.epsilon))?;
        if let Some(eps) = cfg.target_eps {
            let noise = gamma_for_target(&sens, alpha, eps)?;
            row(&mut out, "gamma for rdp target", format!("{:e} (sigma2 = {:e})", noise.gamma, noise.sigma2))?;
        }
    }
    if let Some(eps) = cfg.target_eps {
        let cal = optimize_gamma(&sens, cfg.d, &DpPoint::new(eps, cfg.delta)?)?;
        let text = match cal {
            GammaCalibration::Feasible { gamma, sigma2, alpha, achieved } => format!(
                "gamma = {gamma:e}, sigma2 = {sigma2:e}, alpha = {alpha:.6}, epsilon = {:.6}",
                achieved.epsilon
            ),
            GammaCalibration::Infeasible { floor } => format!("infeasible (floor {floor:.6})"),
        };
        row(&mut out, "gamma for dp target", text)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertifyConfig {
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    generator: Option<GeneratorSpec>,
    rho: f64,
    rc: f64,
    #[serde(default)]
    mu_reg: f64,
    #[serde(default = "default_mode")]
    mode: ClipMode,
    #[serde(default = "default_ptr_eps")]
    ptr_eps: f64,
    #[serde(default = "default_ptr_delta")]
    ptr_delta: f64,
    #[serde(default)]
    kappa: Option<f64>,
    #[serde(default)]
    b_clip: Option<f64>,
    #[serde(default)]
    seed: u64,
}

fn default_mode() -> ClipMode {
    ClipMode::Quartic
}
fn default_ptr_eps() -> f64 {
    0.1
}
fn default_ptr_delta() -> f64 {
    1e-8
}
fn default_alpha() -> f64 {
    2.0
}
fn default_eps() -> f64 {
    0.1
}
fn default_clip_mult() -> f64 {
    1.0
}
fn default_iters() -> usize {
    100
}
fn default_nodes() -> usize {
    2
}
fn default_eta_constants() -> EtaConstants {
    EtaConstants::Full
}

pub fn certify(args: &CertifyArgs) -> CliResult {
    let cfg: CertifyConfig = resolve(args.config.as_deref(), args)?;
    let data = load_data(&cfg.data, &cfg.generator)?;
    let params = CertifyParams {
        shape: ClipShape::identity(data.dim(), cfg.rc)?,
        mode: cfg.mode,
        rho: cfg.rho,
        mu_reg: cfg.mu_reg,
        ptr_eps: cfg.ptr_eps,
        ptr_delta: cfg.ptr_delta,
        kappa: cfg.kappa,
        b_clip: cfg.b_clip.unwrap_or(f64::INFINITY),
    };
    let mut rng = SeededRng::derived(cfg.seed, "ptr", 0, 0);
    let outcome = certify_relative_sensitivity(&data, &params, &mut rng)?;
    let mut out = output(&args.out)?;
    writeln!(out, "{}", outcome.certificate.to_json()?)?;
    out.flush()?;
    if !outcome.certificate.is_accepted() {
        eprintln!("stability test rejected: no sensitivity released");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Rgm,
    Clip,
    Vanilla,
}

fn method_spec(method: Method, ptr_eps: f64, ptr_delta: f64, eta_constants: EtaConstants, clip_mult: f64) -> MethodSpec {
    match method {
        Method::Rgm => MethodSpec::Rgm {
            ptr_eps,
            ptr_delta,
            eta_constants,
        },
        Method::Clip => MethodSpec::Clipped { multiplier: clip_mult },
        Method::Vanilla => MethodSpec::Vanilla,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    generator: Option<GeneratorSpec>,
    method: Method,
    #[serde(default)]
    mu_reg: f64,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default)]
    r_rel: f64,
    #[serde(default = "default_ptr_eps")]
    ptr_eps: f64,
    #[serde(default = "default_ptr_delta")]
    ptr_delta: f64,
    #[serde(default = "default_eta_constants")]
    eta_constants: EtaConstants,
    #[serde(default = "default_clip_mult")]
    clip_mult: f64,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default = "default_iters")]
    iters: usize,
    #[serde(default)]
    seed: u64,
}

pub fn train(args: &TrainArgs) -> CliResult {
    let cfg: TrainConfig = resolve(args.config.as_deref(), args)?;
    let data = load_data(&cfg.data, &cfg.generator)?;
    let d = data.dim();
    let spec = match (cfg.method, cfg.eta) {
        // a given sensitivity replaces the stability test
        (Method::Rgm, Some(_)) => MethodSpec::Vanilla,
        _ => method_spec(cfg.method, cfg.ptr_eps, cfg.ptr_delta, cfg.eta_constants, cfg.clip_mult),
    };
    let node = prepare_nodes(vec![data], cfg.mu_reg, &spec, cfg.alpha, cfg.eps, cfg.seed)?.remove(0);
    let noise = match (&node.privatizer, cfg.eta) {
        (Privatizer::None, Some(eta)) if cfg.method == Method::Rgm => {
            let sens = RelativeSensitivity::new(eta, cfg.r_rel)?;
            GradientNoise::Rgm(gamma_for_target(&sens, cfg.alpha, cfg.eps)?)
        }
        (Privatizer::None, _) => GradientNoise::None,
        (Privatizer::Rgm { noise, .. }, _) => GradientNoise::Rgm(*noise),
        (Privatizer::ClippedGm { threshold, sigma2 }, _) => GradientNoise::ClippedGm {
            threshold: *threshold,
            sigma2: *sigma2,
        },
    };
    let tau = cfg.tau.unwrap_or_else(|| 0.5 / sym_extreme_eigenvalues(&node.model.a).1);
    let gd = GdConfig {
        tau,
        iters: cfg.iters,
        theta0: DVector::zeros(d),
        noise,
        seed: cfg.seed,
    };
    let traj = match noise {
        GradientNoise::None => vanilla_gd(&node.model, &gd)?,
        GradientNoise::Rgm(_) => private_gd(&node.model, &gd)?,
        GradientNoise::ClippedGm { .. } => clipped_dp_gd(&node.data, cfg.mu_reg, &gd)?,
    };
    let echo = json!({ "config": cfg, "tau": tau, "noise": noise, "privatizer": node.privatizer });
    let columns: Vec<String> = TRAJECTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = output(&args.out)?;
    write_csv(&mut out, &echo, cfg.seed, &columns, &traj.csv_rows())?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FedsimConfig {
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    generator: Option<GeneratorSpec>,
    #[serde(default = "default_split")]
    split: SplitStrategy,
    #[serde(default = "default_nodes")]
    nodes: usize,
    #[serde(default)]
    bias_b: f64,
    #[serde(default)]
    samples_per_node: Option<usize>,
    method: Method,
    #[serde(default)]
    mu_reg: f64,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default = "default_ptr_eps")]
    ptr_eps: f64,
    #[serde(default = "default_ptr_delta")]
    ptr_delta: f64,
    #[serde(default = "default_eta_constants")]
    eta_constants: EtaConstants,
    #[serde(default = "default_clip_mult")]
    clip_mult: f64,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default = "default_iters")]
    iters: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    aggregation: Aggregation,
}

fn default_split() -> SplitStrategy {
    SplitStrategy::Random
}

pub fn fedsim(args: &FedsimArgs) -> CliResult {
    let cfg: FedsimConfig = resolve(args.config.as_deref(), args)?;
    let data = load_data(&cfg.data, &cfg.generator)?;
    let d = data.dim();
    let split = SplitSpec {
        strategy: cfg.split,
        num_nodes: cfg.nodes,
        bias_b: cfg.bias_b,
        samples_per_node: cfg.samples_per_node,
        seed: cfg.seed,
    };
    let parts = split_dataset(&data, &split)?;
    let spec = method_spec(cfg.method, cfg.ptr_eps, cfg.ptr_delta, cfg.eta_constants, cfg.clip_mult);
    let nodes = prepare_nodes(parts, cfg.mu_reg, &spec, cfg.alpha, cfg.eps, cfg.seed)?;
    let fed = FedConfig {
        tau: cfg.tau.unwrap_or_else(|| experiment_step_size(&nodes)),
        iters: cfg.iters,
        theta0: DVector::zeros(d),
        seed: cfg.seed,
        aggregation: cfg.aggregation,
    };
    let result = run_federated(&nodes, &fed)?;
    let echo = json!({ "config": cfg, "run": result.config_echo });
    let mut out = output(&args.out)?;
    write_csv(&mut out, &echo, cfg.seed, &result.csv_columns(), &result.csv_rows())?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    #[serde(default)]
    trials: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    delta_instances: Option<usize>,
    #[serde(default)]
    mc_samples: Option<usize>,
    #[serde(default)]
    utility_seeds: Option<usize>,
}

pub fn verify(args: &VerifyArgs) -> CliResult {
    let cfg: VerifyConfig = resolve(args.config.as_deref(), args)?;
    let def = VerifyOptions::default();
    let opts = VerifyOptions {
        trials: cfg.trials.unwrap_or(def.trials),
        seed: cfg.seed.unwrap_or(def.seed),
        delta_instances: cfg.delta_instances.unwrap_or(def.delta_instances),
        mc_samples: cfg.mc_samples.unwrap_or(def.mc_samples),
        utility_seeds: cfg.utility_seeds.unwrap_or(def.utility_seeds),
    };
    if opts.trials == 0 || opts.mc_samples < 2 || opts.utility_seeds < 2 {
        return Err(CliError::Usage("need trials >= 1, mc-samples >= 2, utility-seeds >= 2".into()));
    }
    let report = run_all(&opts)?;
    let mut out = io::stdout().lock();
    for s in &report.suites {
        writeln!(
            out,
            "{} {}: {} checks, {} violations; {}",
            if s.passed() { "PASS" } else { "FAIL" },
            s.name,
            s.checks,
            s.violations,
            s.detail
        )?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Violation("verification failed".into()))
    }
}

pub fn gen(args: &GenArgs) -> CliResult {
    let mut value: serde_json::Value = resolve(args.config.as_deref(), args)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Usage("generator config must be an object".into()))?;
    if obj.get("kind").and_then(|k| k.as_str()) == Some("gaussian") && !obj.contains_key("sigma") {
        obj.insert("sigma".into(), json!({"kind": "identity"}));
    }
    obj.entry("seed").or_insert(json!(0));
    let spec: GeneratorSpec =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid generator spec: {e}")))?;
    let mut out = output(&args.out)?;
    match spec.kind {
        GeneratorKind::TwoQuadratics { .. } => {
            let pair = gen_two_quadratics(&spec)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&pair).map_err(|e| CliError::Usage(e.to_string()))?)?;
        }
        _ => {
            let data = load_data(&None, &Some(spec))?;
            write_libsvm(&data, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

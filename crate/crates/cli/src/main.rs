//! `rgm`: accounting, certification, training and simulation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input data. Exit status 2.
    Usage(String),
    /// A check failed or the run could not be completed. Exit status 1.
    Violation(String),
}

impl From<rgm_core::Error> for CliError {
    fn from(e: rgm_core::Error) -> Self {
        use rgm_core::Error as E;
        match e {
            E::RejectedCertificate | E::Singular { .. } => CliError::Violation(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "rgm", version, about = "Relative Gaussian Mechanism toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print RDP, (eps, delta)-DP and tCDP guarantees for given parameters.
    Account(AccountArgs),
    /// Clip a dataset, run the stability test and emit a certificate as JSON.
    Certify(CertifyArgs),
    /// Single-node gradient descent; writes a trajectory CSV.
    Train(TrainArgs),
    /// Multi-node simulation with local privatization; writes a metrics CSV.
    Fedsim(FedsimArgs),
    /// Run the oracle suites; exits 1 on any violation.
    Verify(VerifyArgs),
    /// Write a synthetic dataset (LibSVM) or a two-quadratic instance (JSON).
    Gen(GenArgs),
}

#[derive(Args, Serialize)]
pub struct AccountArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long = "r-rel")]
    pub r_rel: Option<f64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Renyi order for the per-order rows.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Sets `gamma = gamma_mult * eta^2` when `--gamma` is absent.
    #[arg(long = "gamma-mult")]
    pub gamma_mult: Option<f64>,
    /// Target epsilon for the gamma optimiser.
    #[arg(long = "target-eps")]
    pub target_eps: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct DataArgs {
    /// LibSVM file. A generator may be given in the config file instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct CertifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub rc: Option<f64>,
    #[arg(long = "mu-reg")]
    pub mu_reg: Option<f64>,
    /// quartic or ellipsoid.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long = "ptr-eps")]
    pub ptr_eps: Option<f64>,
    #[arg(long = "ptr-delta")]
    pub ptr_delta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long = "b-clip")]
    pub b_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// rgm, clip or vanilla.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long = "mu-reg")]
    pub mu_reg: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Per-step Renyi budget.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Certified relative sensitivity; skips the stability test when given.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long = "r-rel")]
    pub r_rel: Option<f64>,
    #[arg(long = "ptr-eps")]
    pub ptr_eps: Option<f64>,
    #[arg(long = "ptr-delta")]
    pub ptr_delta: Option<f64>,
    #[arg(long = "clip-mult")]
    pub clip_mult: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct FedsimArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// random, label or bias.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long = "bias-b")]
    pub bias_b: Option<f64>,
    #[arg(long = "samples-per-node")]
    pub samples_per_node: Option<usize>,
    /// rgm, clip or vanilla.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long = "mu-reg")]
    pub mu_reg: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "ptr-eps")]
    pub ptr_eps: Option<f64>,
    #[arg(long = "ptr-delta")]
    pub ptr_delta: Option<f64>,
    /// full or omitted.
    #[arg(long = "eta-constants")]
    pub eta_constants: Option<String>,
    #[arg(long = "clip-mult")]
    pub clip_mult: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// mean or weighted.
    #[arg(long)]
    pub aggregation: Option<String>,
}

#[derive(Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "delta-instances")]
    pub delta_instances: Option<usize>,
    #[arg(long = "mc-samples")]
    pub mc_samples: Option<usize>,
    #[arg(long = "utility-seeds")]
    pub utility_seeds: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// gaussian, orthogonal or two_quadratics.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "label-noise")]
    pub label_noise: Option<f64>,
    #[arg(long = "binary-labels")]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub binary_labels: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Account(a) => commands::account(&a),
        Command::Certify(a) => commands::certify(&a),
        Command::Train(a) => commands::train(&a),
        Command::Fedsim(a) => commands::fedsim(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Gen(a) => commands::gen(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Violation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

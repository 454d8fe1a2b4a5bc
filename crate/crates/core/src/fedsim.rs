//! In-process simulator of distributed gradient descent where every node
//! privatises its own gradient before the server averages them.
//!
//! Node `i` draws round-`t` noise from the stream derived from
//! `(seed, "node", i, t)`; nodes run in parallel and are reduced in node order,
//! so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{gamma_for_target, mechanism_rdp_epsilon, RdpPoint, RgmNoise};
use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::linalg::sym_extreme_eigenvalues;
use crate::mechanisms::{gaussian_mechanism, relative_gaussian_mechanism, SeededRng};
use crate::optim::{clipped_gm_variance, clipped_mean_gradient, Recorder, Trajectory};
use crate::quadratic::{
    build_quadratic, delta_plus, ptr_test, r_rel_bound, relative_term, Certificate, ClipMode, ClipShape, QuadraticModel,
};

const NODE_STREAM_TAG: &str = "node";
const SPLIT_STREAM_TAG: &str = "split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitStrategy {
    Random,
    Label,
    Bias,
}

impl std::str::FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(SplitStrategy::Random),
            "label" => Ok(SplitStrategy::Label),
            "bias" => Ok(SplitStrategy::Bias),
            other => Err(format!("unknown split strategy {other:?} (expected random, label or bias)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub num_nodes: usize,
    /// Label shift applied to node 1 under the bias strategy.
    #[serde(default)]
    pub bias_b: f64,
    /// Per-node subsample size. Required semantics differ by strategy: for
    /// `label` it defaults to the smaller class size, for the others to an
    /// even partition of all records.
    #[serde(default)]
    pub samples_per_node: Option<usize>,
    pub seed: u64,
}

/// Index sets of each node, before any label shift.
pub fn split_indices(data: &FeatureDataset, spec: &SplitSpec) -> Result<Vec<Vec<usize>>> {
    const OP: &str = "split_dataset";
    data.require_nonempty()?;
    if spec.num_nodes == 0 {
        return Err(Error::domain(OP, "num_nodes >= 1"));
    }
    let n = data.len();
    let mut rng = SeededRng::derived(spec.seed, SPLIT_STREAM_TAG, 0, 0);
    match spec.strategy {
        SplitStrategy::Random | SplitStrategy::Bias => {
            if spec.strategy == SplitStrategy::Bias && spec.num_nodes < 2 {
                return Err(Error::domain(OP, "bias split needs num_nodes >= 2"));
            }
            let per = spec.samples_per_node.unwrap_or(n / spec.num_nodes);
            if per == 0 || per * spec.num_nodes > n {
                return Err(Error::precondition(
                    OP,
                    format!("{} nodes x {per} samples need at least that many records (n = {n})", spec.num_nodes),
                ));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            Ok(idx.chunks(per).take(spec.num_nodes).map(|c| c.to_vec()).collect())
        }
        SplitStrategy::Label => {
            if spec.num_nodes != 2 {
                return Err(Error::domain(OP, format!("label split needs exactly 2 nodes (got {})", spec.num_nodes)));
            }
            let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| data.y[i] > 0.0);
            if pos.is_empty() || neg.is_empty() {
                return Err(Error::domain(OP, "label split needs both positive and non-positive labels"));
            }
            let per = spec.samples_per_node.unwrap_or(pos.len().min(neg.len()));
            if per == 0 || per > pos.len() || per > neg.len() {
                return Err(Error::precondition(
                    OP,
                    format!("{per} samples per node exceed a class size ({} positive, {} other)", pos.len(), neg.len()),
                ));
            }
            rng.shuffle(&mut pos);
            rng.shuffle(&mut neg);
            pos.truncate(per);
            neg.truncate(per);
            Ok(vec![pos, neg])
        }
    }
}

/// Splits the records across nodes. Label strategy: node 0 receives positive
/// labels, node 1 the rest. Bias strategy: random split, then `y += B` on node 1.
pub fn split_dataset(data: &FeatureDataset, spec: &SplitSpec) -> Result<Vec<FeatureDataset>> {
    let parts = split_indices(data, spec)?;
    let mut out: Vec<FeatureDataset> = parts.iter().map(|idx| data.select(idx)).collect();
    if spec.strategy == SplitStrategy::Bias {
        out[1].y.add_scalar_mut(spec.bias_b);
    }
    Ok(out)
}

/// How a node perturbs its gradient before sending it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Privatizer {
    None,
    Rgm {
        noise: RgmNoise,
        certificate: Box<Certificate>,
        /// Renyi guarantee of one release, recomputed from the certificate.
        rdp: RdpPoint,
    },
    ClippedGm {
        threshold: f64,
        sigma2: f64,
    },
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub node_id: usize,
    pub data: FeatureDataset,
    pub model: QuadraticModel,
    pub privatizer: Privatizer,
}

impl NodeState {
    pub fn new(node_id: usize, data: FeatureDataset, mu_reg: f64) -> Result<Self> {
        let model = build_quadratic(&data, mu_reg)?;
        Ok(Self {
            node_id,
            data,
            model,
            privatizer: Privatizer::None,
        })
    }

    pub fn with_privatizer(mut self, privatizer: Privatizer) -> Self {
        self.privatizer = privatizer;
        self
    }

    /// Released gradient at `theta` and the realised noise power.
    pub fn release(&self, theta: &DVector<f64>, rng: &mut SeededRng) -> Result<(DVector<f64>, f64)> {
        match &self.privatizer {
            Privatizer::None => Ok((self.model.gradient(theta), 0.0)),
            Privatizer::Rgm { noise, .. } => {
                let g = self.model.gradient(theta);
                let out = relative_gaussian_mechanism(&g, noise, rng)?;
                let p = (&out - &g).norm_squared();
                Ok((out, p))
            }
            Privatizer::ClippedGm { threshold, sigma2 } => {
                let g = clipped_mean_gradient(&self.data, self.model.mu_reg, theta, *threshold);
                let out = gaussian_mechanism(&g, *sigma2, rng)?;
                let p = (&out - &g).norm_squared();
                Ok((out, p))
            }
        }
    }

    /// Expected per-coordinate noise variance at `theta`.
    pub fn declared_variance(&self, theta: &DVector<f64>) -> f64 {
        match &self.privatizer {
            Privatizer::None => 0.0,
            Privatizer::Rgm { noise, .. } => noise.variance(self.model.gradient(theta).norm_squared()),
            Privatizer::ClippedGm { sigma2, .. } => *sigma2,
        }
    }
}

/// `multiplier * max_j |X_j (X_j^T theta_i* - y_j)|` at the local optimum.
/// Only the data part of each per-sample gradient is measured; the ridge
/// term is added unclipped.
pub fn auto_clip_threshold(node: &NodeState, multiplier: f64) -> Result<f64> {
    let star = node.model.optimum()?;
    let max = (0..node.data.len())
        .map(|j| node.data.sample_gradient(j, &star).norm())
        .fold(0.0, f64::max);
    Ok(multiplier * max)
}

/// Clipped-GM privatizer with `c = auto_clip_threshold * multiplier` and
/// `sigma2 = alpha c^2 / (eps N^2)`.
pub fn make_privatizer_clipped(node: &NodeState, alpha: f64, eps: f64, multiplier: f64) -> Result<Privatizer> {
    if !(alpha > 1.0 && eps > 0.0 && multiplier > 0.0) {
        return Err(Error::domain(
            "make_privatizer_clipped",
            format!("alpha > 1, eps > 0, multiplier > 0 (alpha = {alpha}, eps = {eps}, multiplier = {multiplier})"),
        ));
    }
    let threshold = auto_clip_threshold(node, multiplier)?;
    if threshold == 0.0 {
        return Err(Error::domain("make_privatizer_clipped", "positive clipping threshold (all gradients vanish)"));
    }
    Ok(Privatizer::ClippedGm {
        threshold,
        sigma2: clipped_gm_variance(alpha, threshold, eps, node.data.len()),
    })
}

/// RGM privatizer calibrated so that one release is `(alpha, eps_star)`-RDP
/// under the certified sensitivity.
pub fn make_privatizer_rgm(node: &NodeState, alpha: f64, eps_star: f64, cert: &Certificate) -> Result<Privatizer> {
    let sens = cert.sensitivity()?;
    let noise = gamma_for_target(&sens, alpha, eps_star)?;
    let rdp = mechanism_rdp_epsilon(&sens, &noise, alpha, node.model.dim())?;
    Ok(Privatizer::Rgm {
        noise,
        certificate: Box::new(cert.clone()),
        rdp,
    })
}

/// How `eta` is derived in the experiment protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaConstants {
    /// `eta^2 = 6 R_c^4 / (rho^2 n^2)`.
    Full,
    /// `eta^2 = R_c^4 / n^2`, dropping the constant factors.
    Omitted,
}

pub const EXPERIMENT_PROTOCOL_NOTE: &str =
    "experiment protocol: C and R_c chosen from the local data; not strictly differentially private";

/// Certifies a node with `C = A_i`, `rho = 1/2` and `R_c` the largest quartic
/// score, so no record is clipped. `delta_plus` and the stability test still
/// run on the data as usual.
pub fn experiment_certificate(
    node: &NodeState,
    ptr_eps: f64,
    ptr_delta: f64,
    constants: EtaConstants,
    rng: &mut SeededRng,
) -> Result<Certificate> {
    const RHO: f64 = 0.5;
    let a = &node.model.a;
    let n = node.data.len();
    let mut max_rel = 0.0f64;
    for i in 0..n {
        max_rel = max_rel.max(relative_term(&node.data.column(i), a)?);
    }
    let r_c = max_rel.sqrt().sqrt();
    let shape = ClipShape::new(a.clone(), r_c.max(f64::MIN_POSITIVE))?;
    let dplus = delta_plus(&node.data, &node.model, &shape, RHO)?;
    let ptr = ptr_test(dplus, ptr_eps, ptr_delta, rng)?;
    let (eta, r_rel) = if ptr.accepted {
        let n = n as f64;
        let eta = match constants {
            EtaConstants::Full => (6.0 * max_rel / (RHO * RHO * n * n)).sqrt(),
            EtaConstants::Omitted => max_rel.sqrt() / n,
        };
        (Some(eta), Some(r_rel_bound(&node.model, &node.data, eta, f64::INFINITY)))
    } else {
        (None, None)
    };
    Ok(Certificate {
        eta,
        r_rel,
        rho: RHO,
        r_c,
        mode: ClipMode::Quartic,
        ptr,
        seed: rng.seed(),
        mu_reg: node.model.mu_reg,
        kappa: 1.0,
        b_clip: None,
        note: Some(format!(
            "{EXPERIMENT_PROTOCOL_NOTE}; eta constants {}",
            match constants {
                EtaConstants::Full => "full",
                EtaConstants::Omitted => "omitted",
            }
        )),
    })
}

/// Gradient release method shared by every node of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Vanilla,
    Rgm {
        ptr_eps: f64,
        ptr_delta: f64,
        eta_constants: EtaConstants,
    },
    Clipped {
        multiplier: f64,
    },
}

/// Builds one node per part and attaches the privatizer for `method`,
/// calibrated to `(alpha, eps)`-RDP per release. Each node's stability test
/// draws from its own stream.
pub fn prepare_nodes(
    parts: Vec<FeatureDataset>,
    mu_reg: f64,
    method: &MethodSpec,
    alpha: f64,
    eps: f64,
    seed: u64,
) -> Result<Vec<NodeState>> {
    parts
        .into_iter()
        .enumerate()
        .map(|(i, part)| {
            let node = NodeState::new(i, part, mu_reg)?;
            let privatizer = match *method {
                MethodSpec::Vanilla => Privatizer::None,
                MethodSpec::Clipped { multiplier } => make_privatizer_clipped(&node, alpha, eps, multiplier)?,
                MethodSpec::Rgm {
                    ptr_eps,
                    ptr_delta,
                    eta_constants,
                } => {
                    let mut rng = SeededRng::derived(seed, "ptr", i as u64, 0);
                    let cert = experiment_certificate(&node, ptr_eps, ptr_delta, eta_constants, &mut rng)?;
                    make_privatizer_rgm(&node, alpha, eps, &cert)?
                }
            };
            Ok(node.with_privatizer(privatizer))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean over nodes.
    #[default]
    Mean,
    /// Mean weighted by local sample counts.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub tau: f64,
    pub iters: usize,
    pub theta0: DVector<f64>,
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FedRunResult {
    pub trajectory: Trajectory,
    /// `per_node_noise[i][t]` is node `i`'s realised noise power at round `t`.
    pub per_node_noise: Vec<Vec<f64>>,
    pub config_echo: serde_json::Value,
}

impl FedRunResult {
    pub fn csv_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["t", "dist_sq", "fgap"].iter().map(|s| s.to_string()).collect();
        cols.extend((0..self.per_node_noise.len()).map(|i| format!("noise_power_node{i}")));
        cols
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let tr = &self.trajectory;
        (0..tr.len())
            .map(|t| {
                let mut row = vec![
                    t.to_string(),
                    tr.dist_sq_to_opt[t].to_string(),
                    tr.function_gap[t].to_string(),
                ];
                row.extend(
                    self.per_node_noise
                        .iter()
                        .map(|p| p.get(t).map(|v| v.to_string()).unwrap_or_default()),
                );
                row
            })
            .collect()
    }
}

fn node_weights(nodes: &[NodeState], agg: Aggregation) -> Vec<f64> {
    match agg {
        Aggregation::Mean => vec![1.0 / nodes.len() as f64; nodes.len()],
        Aggregation::Weighted => {
            let total: usize = nodes.iter().map(|n| n.data.len()).sum();
            nodes.iter().map(|n| n.data.len() as f64 / total as f64).collect()
        }
    }
}

/// The objective the server effectively minimises: the aggregation-weighted
/// average of the node objectives.
pub fn pooled_model(nodes: &[NodeState], agg: Aggregation) -> Result<QuadraticModel> {
    let first = nodes.first().ok_or(Error::EmptyDataset)?;
    let d = first.model.dim();
    let w = node_weights(nodes, agg);
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut offset = 0.0;
    for (node, wi) in nodes.iter().zip(&w) {
        if node.model.dim() != d {
            return Err(Error::DimensionMismatch {
                op: "pooled_model",
                expected: d,
                got: node.model.dim(),
            });
        }
        a += &node.model.a * *wi;
        b += &node.model.b * *wi;
        offset += node.model.offset * wi;
    }
    Ok(QuadraticModel {
        a,
        b,
        mu_reg: first.model.mu_reg,
        n: nodes.iter().map(|n| n.data.len()).sum(),
        offset,
    })
}

/// Step size `0.5 / max_i lambda_max(A_i)`.
pub fn experiment_step_size(nodes: &[NodeState]) -> f64 {
    let lmax = nodes
        .iter()
        .map(|n| sym_extreme_eigenvalues(&n.model.a).1)
        .fold(0.0, f64::max);
    0.5 / lmax
}

/// Runs `T` rounds of `theta <- theta - tau * aggregate(released gradients)`.
/// Distances are measured to the minimiser of [`pooled_model`].
pub fn run_federated(nodes: &[NodeState], cfg: &FedConfig) -> Result<FedRunResult> {
    const OP: &str = "run_federated";
    let pooled = pooled_model(nodes, cfg.aggregation)?;
    let d = pooled.dim();
    if cfg.theta0.len() != d {
        return Err(Error::DimensionMismatch {
            op: OP,
            expected: d,
            got: cfg.theta0.len(),
        });
    }
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) || cfg.iters == 0 {
        return Err(Error::domain(OP, format!("tau > 0 and T >= 1 (tau = {}, T = {})", cfg.tau, cfg.iters)));
    }
    let w = node_weights(nodes, cfg.aggregation);
    let theta_star = pooled.reference_minimizer(&cfg.theta0);
    let mut rec = Recorder::new(&pooled, &cfg.theta0, theta_star);
    let mut per_node_noise = vec![Vec::with_capacity(cfg.iters); nodes.len()];
    let mut theta = cfg.theta0.clone();
    for t in 0..cfg.iters {
        let released: Vec<(DVector<f64>, f64)> = nodes
            .par_iter()
            .map(|node| {
                let mut rng = SeededRng::derived(cfg.seed, NODE_STREAM_TAG, node.node_id as u64, t as u64);
                node.release(&theta, &mut rng)
            })
            .collect::<Result<_>>()?;
        let mut step = DVector::zeros(d);
        let mut total_power = 0.0;
        for (i, ((g, p), wi)) in released.iter().zip(&w).enumerate() {
            step += g * *wi;
            total_power += p;
            per_node_noise[i].push(*p);
        }
        theta -= step * cfg.tau;
        rec.push_noise(total_power);
        rec.push(theta.clone());
    }
    let config_echo = serde_json::json!({
        "tau": cfg.tau,
        "iters": cfg.iters,
        "theta0": cfg.theta0.as_slice(),
        "seed": cfg.seed,
        "aggregation": cfg.aggregation,
        "nodes": nodes.iter().map(|n| serde_json::json!({
            "node_id": n.node_id,
            "n": n.data.len(),
            "mu_reg": n.model.mu_reg,
            "privatizer": n.privatizer,
        })).collect::<Vec<_>>(),
    });
    Ok(FedRunResult {
        trajectory: rec.finish(),
        per_node_noise,
        config_echo,
    })
}

//! Constrained variational inference over a node's label simplex.
//!
//! Each object or predicate node gets an independent concave objective
//! `E_q[scores] + H(q)` maximized over the probability simplex. The solver of
//! record is entropic mirror descent: a multiplicative exponentiated-gradient
//! update `q <- q * exp(a_i * grad - max)` renormalized each step, with the
//! step size decaying as `a_i = a0 / sqrt(i)` and an early stop when
//! successive objective values agree within a tolerance. A projected gradient
//! baseline and the closed-form softmax optimum are provided for
//! verification. Posteriors come from a surrogate logit: the marginal log
//! scores minus the best objective value seen, normalized by log-sum-exp.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{argmax, Distribution, NodeId, NodeKind, SceneGraphInstance};
use crate::scoring::{joint_log_score, node_marginal_log_score, FeatureModel};
use crate::factor_graph::LabelAssignment;

/// Floor applied inside `log q` so gradients stay finite at the boundary.
const Q_FLOOR: f64 = 1e-12;

/// Largest joint assignment space `exact_gibbs_marginals` will enumerate.
const ENUMERATION_LIMIT: f64 = 1e7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Uniform,
    Random,
}

/// Solver settings shared by the mirror-descent and projected-gradient loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdConfig {
    pub max_iterations: usize,
    pub initial_learning_rate: f64,
    pub tolerance: f64,
    pub init_mode: InitMode,
}

impl Default for EmdConfig {
    fn default() -> Self {
        EmdConfig {
            max_iterations: 20,
            initial_learning_rate: 1.0,
            tolerance: 1e-4,
            init_mode: InitMode::Random,
        }
    }
}

impl EmdConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !self.initial_learning_rate.is_finite() || self.initial_learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("initial learning rate must be positive".into()));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One solver iteration: 1-based index, objective value at the iterate, and
/// the learning rate scheduled for the step taken from it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub elbo: f64,
    pub learning_rate: f64,
}

/// Outcome of one per-node solve.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub q: Distribution,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl VariationalState {
    /// Best objective value seen across the run, used as the surrogate-logit
    /// offset. The trace always has at least one entry.
    pub fn best_elbo(&self) -> f64 {
        self.trace.iter().map(|t| t.elbo).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Posterior of a single node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePosterior {
    pub surrogate_logit: Vec<f64>,
    pub log_posterior: Vec<f64>,
    pub map_label: usize,
}

impl NodePosterior {
    pub fn from_scores(scores: &[f64], elbo_max: f64) -> Result<Self> {
        let surrogate_logit = surrogate_logit(scores, elbo_max)?;
        let (log_posterior, map_label) = log_posterior(&surrogate_logit)?;
        Ok(NodePosterior { surrogate_logit, log_posterior, map_label })
    }
}

/// Per-node inference result: posterior plus the solver state behind it.
#[derive(Clone, Debug)]
pub struct NodeInference {
    pub posterior: NodePosterior,
    pub state: VariationalState,
}

/// Numerically stable log of the summed exponentials.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::ShapeMismatch("empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score vector".into()));
    }
    Ok(())
}

/// Objective value `E_q[scores] + H(q)`, with `0 * log 0 := 0`.
pub fn elbo(scores: &[f64], q: &Distribution) -> Result<f64> {
    check_scores(scores)?;
    if scores.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores against a length-{} distribution",
            scores.len(),
            q.len()
        )));
    }
    let mut value = 0.0;
    for (&s, &p) in scores.iter().zip(q.probs()) {
        if p > 0.0 {
            value += p * (s - p.ln());
        }
    }
    Ok(value)
}

/// One exponentiated-gradient step: `r = lr * gradient`,
/// `q <- q * exp(r - max(r))` renormalized.
pub fn emd_step(q: &Distribution, gradient: &[f64], learning_rate: f64) -> Result<Distribution> {
    if gradient.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries against a length-{} distribution",
            gradient.len(),
            q.len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::InvalidConfig("learning rate must be finite and non-negative".into()));
    }
    let r: Vec<f64> = gradient.iter().map(|g| learning_rate * g).collect();
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut updated: Vec<f64> = q.probs().iter().zip(&r).map(|(&p, &ri)| p * (ri - max).exp()).collect();
    let norm: f64 = updated.iter().sum();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::NonFinite("exponentiated-gradient update underflowed".into()));
    }
    for u in &mut updated {
        *u /= norm;
    }
    Distribution::new(updated)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    values.iter().map(|&v| (v - threshold).max(0.0)).collect()
}

fn initial_distribution(len: usize, mode: InitMode, rng: &mut impl Rng) -> Distribution {
    match mode {
        InitMode::Uniform => Distribution::uniform(len),
        InitMode::Random => {
            // flat Dirichlet via normalized exponentials, floored for finite logs
            let mut draws: Vec<f64> = (0..len)
                .map(|_| {
                    let u: f64 = rng.random::<f64>();
                    -(1.0 - u).ln()
                })
                .collect();
            let sum: f64 = draws.iter().sum();
            let mut total = 0.0;
            for d in &mut draws {
                *d = (*d / sum).max(Q_FLOOR);
                total += *d;
            }
            for d in &mut draws {
                *d /= total;
            }
            Distribution::new(draws).expect("normalized draw is a distribution")
        }
    }
}

/// Gradient of the objective at `q`: `scores - log q - 1`, with `q` floored.
fn objective_gradient(scores: &[f64], q: &Distribution) -> Vec<f64> {
    scores
        .iter()
        .zip(q.probs())
        .map(|(&s, &p)| s - p.max(Q_FLOOR).ln() - 1.0)
        .collect()
}

enum StepRule {
    Multiplicative,
    Projected,
}

fn solve(
    scores: &[f64],
    config: &EmdConfig,
    rng: &mut impl Rng,
    rule: StepRule,
) -> Result<VariationalState> {
    config.validate()?;
    check_scores(scores)?;
    let mut q = initial_distribution(scores.len(), config.init_mode, rng);
    let mut trace = Vec::new();
    let mut previous = f64::INFINITY;
    let mut converged = false;
    let mut iterations_used = 0;
    for i in 1..=config.max_iterations {
        let value = elbo(scores, &q)?;
        let learning_rate = config.initial_learning_rate / (i as f64).sqrt();
        trace.push(TraceEntry { iteration: i, elbo: value, learning_rate });
        iterations_used = i;
        if (value - previous).abs() < config.tolerance {
            converged = true;
            break;
        }
        previous = value;
        let gradient = objective_gradient(scores, &q);
        q = match rule {
            StepRule::Multiplicative => emd_step(&q, &gradient, learning_rate)?,
            StepRule::Projected => {
                let moved: Vec<f64> = q
                    .probs()
                    .iter()
                    .zip(&gradient)
                    .map(|(&p, &g)| p + learning_rate * g)
                    .collect();
                Distribution::new(project_to_simplex(&moved))?
            }
        };
    }
    Ok(VariationalState { q, trace, converged, iterations_used })
}

/// Entropic mirror descent maximization of the per-node objective.
pub fn emd_infer(scores: &[f64], config: &EmdConfig, rng: &mut impl Rng) -> Result<VariationalState> {
    solve(scores, config, rng, StepRule::Multiplicative)
}

/// Projected gradient ascent baseline with the same schedule, stopping rule
/// and trace format as `emd_infer`.
pub fn pgd_infer(scores: &[f64], config: &EmdConfig, rng: &mut impl Rng) -> Result<VariationalState> {
    solve(scores, config, rng, StepRule::Projected)
}

/// Closed-form optimum of the per-node objective: softmax with
/// max-subtraction. Verification oracle for the iterative solvers.
pub fn softmax_oracle(scores: &[f64]) -> Result<Distribution> {
    check_scores(scores)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Distribution::new(probs)
}

/// Surrogate logit: marginal log scores shifted down by the objective
/// maximum, which stands in for the per-node log partition function.
pub fn surrogate_logit(scores: &[f64], elbo_max: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    if !elbo_max.is_finite() {
        return Err(Error::NonFinite("objective maximum".into()));
    }
    Ok(scores.iter().map(|&s| s - elbo_max).collect())
}

/// Log-sum-exp normalization of a surrogate logit plus the decoded label
/// (lowest index on ties).
pub fn log_posterior(phi: &[f64]) -> Result<(Vec<f64>, usize)> {
    check_scores(phi)?;
    let norm = log_sum_exp(phi);
    let log_probs: Vec<f64> = phi.iter().map(|&p| p - norm).collect();
    let map_label = argmax(&log_probs);
    Ok((log_probs, map_label))
}

/// Derives an independent seed from a master seed and a salt (splitmix64).
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs per-node inference over every object and predicate node.
///
/// Each node draws its initial distribution from an RNG stream derived from
/// `seed` and the node's traversal position, so results do not depend on
/// processing order or scheduling.
pub fn infer_graph(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    config: &EmdConfig,
    seed: u64,
) -> Result<BTreeMap<NodeId, NodeInference>> {
    config.validate()?;
    let mut results = BTreeMap::new();
    for (ordinal, node) in instance.labeled_node_ids().enumerate() {
        let scores = node_marginal_log_score(model, instance, node)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(ordinal as u64);
        let state = emd_infer(&scores, config, &mut rng)?;
        let posterior = NodePosterior::from_scores(&scores, state.best_elbo())?;
        results.insert(node, NodeInference { posterior, state });
    }
    Ok(results)
}

/// Exact posterior marginals by full enumeration of the joint assignment
/// space (objects, predicates and globals). Diagnostic oracle; only feasible
/// for tiny instances.
pub fn exact_gibbs_marginals(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
) -> Result<BTreeMap<NodeId, Distribution>> {
    let vocab = instance.vocab();
    let nodes: Vec<NodeId> = instance.node_ids().collect();
    let radices: Vec<usize> = nodes.iter().map(|n| vocab.for_kind(n.kind)).collect();
    let space = radices.iter().map(|&r| r as f64).product::<f64>();
    if space > ENUMERATION_LIMIT {
        return Err(Error::StateSpaceTooLarge(space, ENUMERATION_LIMIT));
    }

    let score_of = |digits: &[usize]| -> Result<f64> {
        let mut objects = Vec::with_capacity(instance.num_objects());
        let mut predicates = Vec::with_capacity(instance.num_predicates());
        let mut globals = Vec::with_capacity(instance.num_globals());
        for (node, &z) in nodes.iter().zip(digits) {
            match node.kind {
                NodeKind::Object => objects.push(z),
                NodeKind::Predicate => predicates.push(z),
                NodeKind::Global => globals.push(z),
            }
        }
        let mut assignment = LabelAssignment::new(objects, predicates);
        assignment.global_labels = Some(globals);
        joint_log_score(model, instance, &assignment)
    };

    // two passes: find the max joint score, then accumulate exp(score - max)
    let mut digits = vec![0usize; nodes.len()];
    let mut max_score = f64::NEG_INFINITY;
    loop {
        max_score = max_score.max(score_of(&digits)?);
        if !advance(&mut digits, &radices) {
            break;
        }
    }

    let mut acc: Vec<Vec<f64>> = radices.iter().map(|&r| vec![0.0; r]).collect();
    let mut digits = vec![0usize; nodes.len()];
    loop {
        let w = (score_of(&digits)? - max_score).exp();
        for (slot, &z) in acc.iter_mut().zip(&digits) {
            slot[z] += w;
        }
        if !advance(&mut digits, &radices) {
            break;
        }
    }

    let mut marginals = BTreeMap::new();
    for (node, mut weights) in nodes.into_iter().zip(acc) {
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::NonFinite("enumeration weights".into()));
        }
        for w in &mut weights {
            *w /= total;
        }
        marginals.insert(node, Distribution::new(weights)?);
    }
    Ok(marginals)
}

fn advance(digits: &mut [usize], radices: &[usize]) -> bool {
    for (d, &r) in digits.iter_mut().zip(radices) {
        *d += 1;
        if *d < r {
            return true;
        }
        *d = 0;
    }
    false
}

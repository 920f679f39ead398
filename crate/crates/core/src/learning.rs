//! Cross-entropy fitting of the feature model to ground-truth labels.
//!
//! The inner maximization behind each node's posterior has the closed form
//! log-sum-exp of the marginal scores, so training treats the log posterior
//! as the log-softmax of `node_marginal_log_score` and backpropagates through
//! the message and unary blocks by reverse accumulation. Gradients do not
//! unroll through the mirror-descent iterates, which converge to the same
//! value.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor_graph::{LabelAssignment, NodeId, NodeKind, SceneGraphInstance};
use crate::inference::log_sum_exp;
use crate::scoring::{BlockId, FeatureModel, PairScoreMode};
use crate::synthdata::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_clip: Option<f64>,
}

impl TrainConfig {
    /// SGD at the higher conventional rate, `0.008 * batch`.
    pub fn sgd_preset_high(batch_size: usize) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size,
            learning_rate: 0.008 * batch_size as f64,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            gradient_clip: None,
        }
    }

    /// SGD at the lower conventional rate, `0.005 * batch`.
    pub fn sgd_preset_low(batch_size: usize) -> Self {
        TrainConfig { learning_rate: 0.005 * batch_size as f64, ..Self::sgd_preset_high(batch_size) }
    }

    /// Adam at rate 1e-4.
    pub fn adam_preset(batch_size: usize) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            ..Self::sgd_preset_high(batch_size)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        // zero is allowed so a no-op run stays expressible
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if let Some(clip) = self.gradient_clip {
            if !clip.is_finite() || clip <= 0.0 {
                return Err(Error::InvalidConfig("gradient_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradients for one layer, same shapes as the layer itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients mirroring a `FeatureModel`, one entry per block in
/// `BlockId::ALL` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub blocks: Vec<Vec<LayerGrad>>,
}

impl GradientSet {
    pub fn zeros_like(model: &FeatureModel) -> Self {
        let blocks = BlockId::ALL
            .iter()
            .map(|&id| {
                model
                    .block(id)
                    .layers
                    .iter()
                    .map(|layer| LayerGrad {
                        weight: vec![0.0; layer.weight.len()],
                        bias: vec![0.0; layer.bias.len()],
                    })
                    .collect()
            })
            .collect();
        GradientSet { blocks }
    }

    pub fn block(&self, id: BlockId) -> &[LayerGrad] {
        &self.blocks[BlockId::ALL.iter().position(|&b| b == id).unwrap()]
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        self.for_each_with(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each(|x| *x *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        for block in &self.blocks {
            for layer in block {
                total += layer.weight.iter().map(|w| w * w).sum::<f64>();
                total += layer.bias.iter().map(|b| b * b).sum::<f64>();
            }
        }
        total.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .flatten()
            .all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn for_each(&mut self, mut f: impl FnMut(&mut f64)) {
        for block in &mut self.blocks {
            for layer in block {
                layer.weight.iter_mut().for_each(&mut f);
                layer.bias.iter_mut().for_each(&mut f);
            }
        }
    }

    fn for_each_with(&mut self, other: &GradientSet, mut f: impl FnMut(&mut f64, f64)) {
        for (block, oblock) in self.blocks.iter_mut().zip(&other.blocks) {
            for (layer, olayer) in block.iter_mut().zip(oblock) {
                for (w, &ow) in layer.weight.iter_mut().zip(&olayer.weight) {
                    f(w, ow);
                }
                for (b, &ob) in layer.bias.iter_mut().zip(&olayer.bias) {
                    f(b, ob);
                }
            }
        }
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let norm = log_sum_exp(scores);
    scores.iter().map(|&s| s - norm).collect()
}

/// Closed-form training-path posteriors: log-softmax of each node's marginal
/// log score.
pub fn node_log_posteriors(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for node in instance.labeled_node_ids() {
        let scores = crate::scoring::node_marginal_log_score(model, instance, node)?;
        out.insert(node, log_softmax(&scores));
    }
    Ok(out)
}

/// Mean over labelled nodes of the negative log posterior at the
/// ground-truth label.
pub fn cross_entropy_loss(
    log_posteriors: &BTreeMap<NodeId, Vec<f64>>,
    ground_truth: &LabelAssignment,
) -> Result<f64> {
    let labeled = ground_truth.object_labels.len() + ground_truth.predicate_labels.len();
    if labeled == 0 {
        return Err(Error::IncompleteAssignment("no labelled nodes".into()));
    }
    let mut total = 0.0;
    let mut visit = |node: NodeId, label: usize| -> Result<()> {
        let log_probs = log_posteriors
            .get(&node)
            .ok_or_else(|| Error::IncompleteAssignment(format!("no posterior for {node}")))?;
        if label >= log_probs.len() {
            return Err(Error::LabelOutOfRange(format!(
                "{node} label {label} >= vocabulary {}",
                log_probs.len()
            )));
        }
        total -= log_probs[label];
        Ok(())
    };
    for (i, &z) in ground_truth.object_labels.iter().enumerate() {
        visit(NodeId::object(i), z)?;
    }
    for (j, &z) in ground_truth.predicate_labels.iter().enumerate() {
        visit(NodeId::predicate(j), z)?;
    }
    Ok(total / labeled as f64)
}

/// Cross-entropy loss of one labelled instance under the closed-form path.
pub fn instance_loss(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    ground_truth: &LabelAssignment,
) -> Result<f64> {
    ground_truth.validate(instance, false)?;
    cross_entropy_loss(&node_log_posteriors(model, instance)?, ground_truth)
}

fn backprop_mlp(
    mlp: &crate::scoring::Mlp,
    activations: &[Vec<f64>],
    mut delta: Vec<f64>,
    grads: &mut [LayerGrad],
) {
    for l in (0..mlp.layers.len()).rev() {
        let layer = &mlp.layers[l];
        let input = &activations[l];
        let grad = &mut grads[l];
        for (r, &d) in delta.iter().enumerate() {
            grad.bias[r] += d;
            let row = &mut grad.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if l > 0 {
            let mut next = vec![0.0; layer.in_dim];
            for (r, &d) in delta.iter().enumerate() {
                let row = &layer.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            // ReLU mask: post-activation is positive iff pre-activation was
            for (n, &a) in next.iter_mut().zip(&activations[l]) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
}

/// Exact gradients of `instance_loss` with respect to every model parameter.
pub fn backward(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    ground_truth: &LabelAssignment,
) -> Result<GradientSet> {
    ground_truth.validate(instance, false)?;
    let mut grads = GradientSet::zeros_like(model);
    let labeled = instance.num_objects() + instance.num_predicates();
    if labeled == 0 {
        return Ok(grads);
    }
    let inv_nodes = 1.0 / labeled as f64;

    for node in instance.labeled_node_ids() {
        let unary_block = match node.kind {
            NodeKind::Object => BlockId::HObject,
            NodeKind::Predicate => BlockId::HPredicate,
            _ => unreachable!(),
        };
        let unary_trace = model.block(unary_block).forward_trace(instance.features(node)?)?;

        let neighbors = instance.neighbors(node)?;
        let mut message_traces = Vec::with_capacity(neighbors.len());
        let mut scores = unary_trace.last().unwrap().clone();
        for &(source, kind) in &neighbors {
            let block = BlockId::for_edge(kind);
            let input = pair_block_input(instance, node, source, kind)?;
            let trace = model.block(block).forward_trace(&input)?;
            let out = trace.last().unwrap();
            let v_s = model.arch.source_vocab(block).unwrap();
            match model.arch.pair_mode {
                PairScoreMode::SourceInvariant => {
                    for (s, &u) in scores.iter_mut().zip(out) {
                        *s += v_s as f64 * u;
                    }
                }
                PairScoreMode::LabelTable => {
                    for (zt, s) in scores.iter_mut().enumerate() {
                        for zs in 0..v_s {
                            *s += out[zt * v_s + zs];
                        }
                    }
                }
            }
            message_traces.push((block, trace));
        }
        for s in &mut scores {
            *s = -*s;
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("marginal scores of {node}")));
        }

        // d loss / d scores = (softmax - onehot) / nodes
        let log_probs = log_softmax(&scores);
        let gt = ground_truth.label_of(node).unwrap();
        let mut d_scores: Vec<f64> = log_probs.iter().map(|lp| lp.exp() * inv_nodes).collect();
        d_scores[gt] -= inv_nodes;

        // scores negate the potential sum, so block outputs see -d_scores
        let d_unary: Vec<f64> = d_scores.iter().map(|d| -d).collect();
        let block_index = BlockId::ALL.iter().position(|&b| b == unary_block).unwrap();
        backprop_mlp(model.block(unary_block), &unary_trace, d_unary, &mut grads.blocks[block_index]);

        for (block, trace) in message_traces {
            let v_s = model.arch.source_vocab(block).unwrap();
            let d_out = match model.arch.pair_mode {
                PairScoreMode::SourceInvariant => {
                    d_scores.iter().map(|d| -(v_s as f64) * d).collect::<Vec<f64>>()
                }
                PairScoreMode::LabelTable => {
                    let v_t = d_scores.len();
                    let mut d = vec![0.0; v_t * v_s];
                    for (zt, &ds) in d_scores.iter().enumerate() {
                        for zs in 0..v_s {
                            d[zt * v_s + zs] = -ds;
                        }
                    }
                    d
                }
            };
            let block_index = BlockId::ALL.iter().position(|&b| b == block).unwrap();
            backprop_mlp(model.block(block), &trace, d_out, &mut grads.blocks[block_index]);
        }
    }
    Ok(grads)
}

fn pair_block_input(
    instance: &SceneGraphInstance,
    target: NodeId,
    source: NodeId,
    kind: crate::factor_graph::EdgeKind,
) -> Result<Vec<f64>> {
    use crate::factor_graph::EdgeKind;
    let t = instance.features(target)?;
    let s = instance.features(source)?;
    let (first, second) = match kind {
        EdgeKind::Po => (s, t),
        _ => (t, s),
    };
    let mut input = Vec::with_capacity(first.len() + second.len());
    input.extend_from_slice(first);
    input.extend_from_slice(second);
    Ok(input)
}

/// Mean loss and mean gradient over a batch, accumulated in sample order.
pub fn batch_gradient(model: &FeatureModel, batch: &[Sample]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total_loss = 0.0;
    let mut grads = GradientSet::zeros_like(model);
    for sample in batch {
        total_loss += instance_loss(model, &sample.instance, &sample.labels)?;
        grads.add_assign(&backward(model, &sample.instance, &sample.labels)?);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((total_loss * inv, grads))
}

/// Adam moment estimates, shaped like the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: GradientSet,
    pub second: GradientSet,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &FeatureModel) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                first: GradientSet::zeros_like(model),
                second: GradientSet::zeros_like(model),
                steps: 0,
            }),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(
    model: &mut FeatureModel,
    mut grads: GradientSet,
    learning_rate: f64,
    clip: Option<f64>,
    state: &mut OptimizerState,
) {
    if let Some(max_norm) = clip {
        let norm = grads.l2_norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
    match state {
        OptimizerState::Sgd => {
            for (bi, &id) in BlockId::ALL.iter().enumerate() {
                let mlp = model.block_mut(id);
                for (layer, grad) in mlp.layers.iter_mut().zip(&grads.blocks[bi]) {
                    for (w, &g) in layer.weight.iter_mut().zip(&grad.weight) {
                        *w -= learning_rate * g;
                    }
                    for (b, &g) in layer.bias.iter_mut().zip(&grad.bias) {
                        *b -= learning_rate * g;
                    }
                }
            }
        }
        OptimizerState::Adam(adam) => {
            adam.steps += 1;
            let t = adam.steps as i32;
            let correction1 = 1.0 - ADAM_BETA1.powi(t);
            let correction2 = 1.0 - ADAM_BETA2.powi(t);
            for (bi, &id) in BlockId::ALL.iter().enumerate() {
                let mlp = model.block_mut(id);
                for (li, (layer, grad)) in mlp.layers.iter_mut().zip(&grads.blocks[bi]).enumerate() {
                    let m = &mut adam.first.blocks[bi][li];
                    let v = &mut adam.second.blocks[bi][li];
                    let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / correction1;
                        let v_hat = *v / correction2;
                        *param -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    };
                    for ((w, &g), (mw, vw)) in layer
                        .weight
                        .iter_mut()
                        .zip(&grad.weight)
                        .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
                    {
                        update(w, g, mw, vw);
                    }
                    for ((b, &g), (mb, vb)) in layer
                        .bias
                        .iter_mut()
                        .zip(&grad.bias)
                        .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
                    {
                        update(b, g, mb, vb);
                    }
                }
            }
        }
    }
}

/// One row of the loss curve. Epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: FeatureModel,
    pub optimizer: OptimizerState,
    pub curve: Vec<EpochStats>,
}

fn dataset_loss(model: &FeatureModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        total += instance_loss(model, &sample.instance, &sample.labels)?;
    }
    let loss = total / samples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("dataset loss is {loss}")));
    }
    Ok(loss)
}

/// Trains a copy of the model. The loss curve holds full-dataset losses, one
/// entry before training and one after each epoch, so epoch boundaries are
/// insensitive to batch ordering. Deterministic for a given config seed.
pub fn train(
    model: &FeatureModel,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model = model.clone();
    let mut state = OptimizerState::new(config.optimizer, &model);
    let mut curve = Vec::with_capacity(config.epochs + 1);
    let eval = |m: &FeatureModel| -> Result<Option<f64>> {
        eval_set.map(|samples| dataset_loss(m, samples)).transpose()
    };
    curve.push(EpochStats {
        epoch: 0,
        train_loss: dataset_loss(&model, train_set)?,
        eval_loss: eval(&model)?,
    });

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!("batch loss {loss} at epoch {epoch}")));
            }
            apply_update(&mut model, grads, config.learning_rate, config.gradient_clip, &mut state);
        }
        curve.push(EpochStats {
            epoch,
            train_loss: dataset_loss(&model, train_set)?,
            eval_loss: eval(&model)?,
        });
    }
    Ok(TrainOutput { model, optimizer: state, curve })
}

/// Serialized model plus optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: FeatureModel,
    pub optimizer: Option<OptimizerState>,
    pub epochs_trained: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let checkpoint: Checkpoint = serde_json::from_str(text)?;
        checkpoint.model.validate()?;
        Ok(checkpoint)
    }
}

/// Loss-curve CSV with one row per epoch.
pub fn curve_to_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,eval_loss\n");
    for row in curve {
        let eval = row.eval_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, eval));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{PredicateDef, VocabSizes};
    use crate::scoring::ModelArch;

    fn fixture_instance() -> SceneGraphInstance {
        SceneGraphInstance::build(
            3,
            VocabSizes::new(4, 3, 2),
            vec![vec![0.4, -0.2, 1.1], vec![-0.9, 0.3, 0.2]],
            vec![PredicateDef { subject: 0, object: 1, features: vec![0.6, -0.5, 0.1] }],
            vec![(0, 1)],
            vec![vec![0.05, 0.15, -0.3]],
        )
        .unwrap()
    }

    fn fixture_labels() -> LabelAssignment {
        LabelAssignment::new(vec![2, 0], vec![1])
    }

    #[test]
    fn uniform_posterior_loss_is_log_v() {
        let mut posteriors = BTreeMap::new();
        posteriors.insert(NodeId::object(0), vec![-(4.0_f64.ln()); 4]);
        posteriors.insert(NodeId::object(1), vec![-(4.0_f64.ln()); 4]);
        let gt = LabelAssignment::new(vec![1, 3], vec![]);
        let loss = cross_entropy_loss(&posteriors, &gt).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_posterior_loss_is_zero() {
        let mut posteriors = BTreeMap::new();
        posteriors.insert(NodeId::object(0), vec![0.0, -1e9]);
        let gt = LabelAssignment::new(vec![0], vec![]);
        assert_eq!(cross_entropy_loss(&posteriors, &gt).unwrap(), 0.0);
    }

    #[test]
    fn two_node_hand_fixture() {
        let mut posteriors = BTreeMap::new();
        posteriors.insert(NodeId::object(0), vec![(0.7_f64).ln(), (0.3_f64).ln()]);
        posteriors.insert(NodeId::predicate(0), vec![(0.2_f64).ln(), (0.8_f64).ln()]);
        let gt = LabelAssignment::new(vec![0], vec![1]);
        let expected = -((0.7_f64).ln() + (0.8_f64).ln()) / 2.0;
        let loss = cross_entropy_loss(&posteriors, &gt).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut posteriors = BTreeMap::new();
        posteriors.insert(NodeId::object(0), vec![-0.5, -1.0]);
        let gt = LabelAssignment::new(vec![2], vec![]);
        assert!(matches!(cross_entropy_loss(&posteriors, &gt), Err(Error::LabelOutOfRange(_))));
    }

    #[test]
    fn zero_model_bias_gradient_is_softmax_minus_onehot() {
        // one isolated object, no messages: the final-bias gradient reduces
        // to onehot - uniform because the scores negate the unary output
        let instance = SceneGraphInstance::build(
            2,
            VocabSizes::new(4, 2, 1),
            vec![vec![0.3, -0.8]],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let model = FeatureModel::zeros(ModelArch::new(2, instance.vocab(), vec![])).unwrap();
        let gt = LabelAssignment::new(vec![2], vec![]);
        let grads = backward(&model, &instance, &gt).unwrap();
        let bias = &grads.block(BlockId::HObject)[0].bias;
        for (z, &g) in bias.iter().enumerate() {
            let expected = if z == 2 { 1.0 - 0.25 } else { -0.25 };
            assert!((g - expected).abs() < 1e-12, "bias[{z}] = {g}");
        }
    }

    #[test]
    fn gradient_reduction_is_linear() {
        // sum of per-instance gradients equals batch_size times the mean
        let samples = tiny_dataset(31);
        let batch = &samples[..4];
        let model =
            FeatureModel::init(ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![5]), 31).unwrap();
        let (_, mean_grad) = batch_gradient(&model, batch).unwrap();
        let mut summed = GradientSet::zeros_like(&model);
        for sample in batch {
            summed.add_assign(&backward(&model, &sample.instance, &sample.labels).unwrap());
        }
        for (a, b) in summed.blocks.iter().flatten().zip(mean_grad.blocks.iter().flatten()) {
            for (x, y) in a.weight.iter().chain(&a.bias).zip(b.weight.iter().chain(&b.bias)) {
                assert!((x - 4.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn central_differences_match_analytic_gradients() {
        let instance = fixture_instance();
        let labels = fixture_labels();
        for mode in [PairScoreMode::SourceInvariant, PairScoreMode::LabelTable] {
            let arch = ModelArch::new(3, instance.vocab(), vec![5]).with_pair_mode(mode);
            let model = FeatureModel::init(arch, 77).unwrap();
            let analytic = backward(&model, &instance, &labels).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for (bi, &id) in BlockId::ALL.iter().enumerate() {
                for li in 0..model.block(id).layers.len() {
                    let wlen = model.block(id).layers[li].weight.len();
                    let blen = model.block(id).layers[li].bias.len();
                    for (is_bias, len) in [(false, wlen), (true, blen)] {
                        for k in 0..len {
                            let mut plus = model.clone();
                            let mut minus = model.clone();
                            {
                                let layer = &mut plus.block_mut(id).layers[li];
                                if is_bias {
                                    layer.bias[k] += h;
                                } else {
                                    layer.weight[k] += h;
                                }
                            }
                            {
                                let layer = &mut minus.block_mut(id).layers[li];
                                if is_bias {
                                    layer.bias[k] -= h;
                                } else {
                                    layer.weight[k] -= h;
                                }
                            }
                            let fd = (instance_loss(&plus, &instance, &labels).unwrap()
                                - instance_loss(&minus, &instance, &labels).unwrap())
                                / (2.0 * h);
                            let a = if is_bias {
                                analytic.blocks[bi][li].bias[k]
                            } else {
                                analytic.blocks[bi][li].weight[k]
                            };
                            let rel = (a - fd).abs() / (a.abs() + 1e-8);
                            worst = worst.max(rel);
                        }
                    }
                }
            }
            assert!(worst < 1e-4, "worst relative error {worst} in mode {mode:?}");
        }
    }

    fn tiny_dataset(seed: u64) -> Vec<Sample> {
        use crate::synthdata::{sample_instance, GeneratorConfig};
        let config = GeneratorConfig {
            m_range: (2, 3),
            predicate_density: 0.5,
            v_o: 4,
            v_p: 3,
            v_g: 2,
            d: 6,
            zipf_exponent: 0.5,
            class_margin: 6.0,
            globals_per_instance: 1,
            seed,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..16).map(|_| sample_instance(&config, &mut rng).unwrap()).collect()
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let samples = tiny_dataset(3);
        let arch = ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![8]);
        let model = FeatureModel::init(arch, 5).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            seed: 9,
            gradient_clip: None,
        };
        let out = train(&model, &samples, None, &config).unwrap();
        assert_eq!(out.model, model);
        let first = out.curve[0].train_loss;
        assert!(out.curve.iter().all(|row| row.train_loss == first));
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_dataset(4);
        let arch = ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![8]);
        let model = FeatureModel::init(arch, 5).unwrap();
        let config = TrainConfig {
            epochs: 4,
            batch_size: 5,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            seed: 9,
            gradient_clip: Some(10.0),
        };
        let a = train(&model, &samples, None, &config).unwrap();
        let b = train(&model, &samples, None, &config).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn epoch_zero_loss_ignores_data_order() {
        let samples = tiny_dataset(6);
        let arch = ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![8]);
        let model = FeatureModel::init(arch, 5).unwrap();
        let mut config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
            gradient_clip: None,
        };
        let a = train(&model, &samples, None, &config).unwrap();
        config.seed = 2; // different shuffle, same weights
        let b = train(&model, &samples, None, &config).unwrap();
        assert_eq!(a.curve[0].train_loss, b.curve[0].train_loss);
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let samples = tiny_dataset(8);
        let (train_set, eval_set) = samples.split_at(12);
        let arch = ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![8]);
        let model = FeatureModel::init(arch, 5).unwrap();
        let config = TrainConfig {
            epochs: 40,
            batch_size: 4,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            seed: 9,
            gradient_clip: None,
        };
        let out = train(&model, train_set, Some(eval_set), &config).unwrap();
        let first = out.curve.first().unwrap();
        let last = out.curve.last().unwrap();
        assert!(last.train_loss < 0.1 * first.train_loss, "{} vs {}", last.train_loss, first.train_loss);
        assert!(last.eval_loss.unwrap() < first.eval_loss.unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let samples = tiny_dataset(10);
        let arch = ModelArch::new(6, VocabSizes::new(4, 3, 2), vec![8]);
        let mut model = FeatureModel::init(arch, 5).unwrap();
        model.h_o.layers[0].weight[0] = 1e300;
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.1,
            optimizer: OptimizerKind::Sgd,
            seed: 9,
            gradient_clip: None,
        };
        assert!(matches!(train(&model, &samples, None, &config), Err(Error::Diverged(_)) | Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ModelArch::new(3, VocabSizes::new(4, 3, 2), vec![5]);
        let model = FeatureModel::init(arch, 41).unwrap();
        let checkpoint = Checkpoint {
            optimizer: Some(OptimizerState::new(OptimizerKind::Adam, &model)),
            model,
            epochs_trained: 7,
        };
        let text = checkpoint.to_json().unwrap();
        let parsed = Checkpoint::from_json(&text).unwrap();
        assert_eq!(parsed.model, checkpoint.model);
        assert_eq!(parsed.epochs_trained, 7);
        assert_eq!(parsed.optimizer, checkpoint.optimizer);
    }
}

//! Potentials and marginal message terms produced by a small parametric
//! feature model.
//!
//! Seven MLP blocks score the graph: `h_o` and `h_p` map a node's features to
//! unary scores over its vocabulary, and five `g` blocks map concatenated
//! feature pairs to pairwise scores, one block per directed interaction kind.
//! A node's marginal log score is the negated sum of its unary scores and the
//! incoming message terms, where each message marginalizes the pairwise
//! potential over the source node's vocabulary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factor_graph::{EdgeKind, LabelAssignment, NodeId, NodeKind, SceneGraphInstance, VocabSizes};

/// How the `g` blocks score a pair of nodes.
///
/// `SourceInvariant` is the default: the pairwise potential depends on the
/// source node only through its features, so marginalizing over the source
/// vocabulary scales the block output by the vocabulary size. `LabelTable`
/// makes the blocks emit a full target-by-source score table instead, giving
/// genuinely label-dependent pair scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScoreMode {
    SourceInvariant,
    LabelTable,
}

/// Identifies one of the seven MLP blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    HObject,
    HPredicate,
    GOp,
    GOo,
    GOg,
    GPo,
    GPg,
}

impl BlockId {
    pub const ALL: [BlockId; 7] = [
        BlockId::HObject,
        BlockId::HPredicate,
        BlockId::GOp,
        BlockId::GOo,
        BlockId::GOg,
        BlockId::GPo,
        BlockId::GPg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::HObject => "h_o",
            BlockId::HPredicate => "h_p",
            BlockId::GOp => "g_op",
            BlockId::GOo => "g_oo",
            BlockId::GOg => "g_og",
            BlockId::GPo => "g_po",
            BlockId::GPg => "g_pg",
        }
    }

    pub fn for_edge(kind: EdgeKind) -> BlockId {
        match kind {
            EdgeKind::Op => BlockId::GOp,
            EdgeKind::Oo => BlockId::GOo,
            EdgeKind::Og => BlockId::GOg,
            EdgeKind::Po => BlockId::GPo,
            EdgeKind::Pg => BlockId::GPg,
        }
    }
}

/// Architecture of a feature model: feature dimension, vocabularies, hidden
/// widths shared by every block, and the pair-score mode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub d: usize,
    pub vocab: VocabSizes,
    pub hidden: Vec<usize>,
    pub pair_mode: PairScoreMode,
}

impl ModelArch {
    pub fn new(d: usize, vocab: VocabSizes, hidden: Vec<usize>) -> Self {
        ModelArch { d, vocab, hidden, pair_mode: PairScoreMode::SourceInvariant }
    }

    pub fn with_pair_mode(mut self, pair_mode: PairScoreMode) -> Self {
        self.pair_mode = pair_mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        if self.vocab.v_o < 2 || self.vocab.v_p < 2 || self.vocab.v_g < 1 {
            return Err(Error::InvalidConfig("vocabulary sizes below minimums".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Vocabulary of the labels a block scores (the message target side).
    pub fn target_vocab(&self, block: BlockId) -> usize {
        match block {
            BlockId::HObject | BlockId::GOp | BlockId::GOo | BlockId::GOg => self.vocab.v_o,
            BlockId::HPredicate | BlockId::GPo | BlockId::GPg => self.vocab.v_p,
        }
    }

    /// Vocabulary the block's message terms marginalize over (source side).
    /// Unary blocks have no source.
    pub fn source_vocab(&self, block: BlockId) -> Option<usize> {
        match block {
            BlockId::HObject | BlockId::HPredicate => None,
            BlockId::GOp => Some(self.vocab.v_p),
            BlockId::GOo => Some(self.vocab.v_o),
            BlockId::GOg => Some(self.vocab.v_g),
            BlockId::GPo => Some(self.vocab.v_o),
            BlockId::GPg => Some(self.vocab.v_g),
        }
    }

    /// Layer widths of a block, from input to output.
    pub fn widths(&self, block: BlockId) -> Vec<usize> {
        let input = match block {
            BlockId::HObject | BlockId::HPredicate => self.d,
            _ => 2 * self.d,
        };
        let output = match (block, self.pair_mode) {
            (BlockId::HObject | BlockId::HPredicate, _) => self.target_vocab(block),
            (_, PairScoreMode::SourceInvariant) => self.target_vocab(block),
            (_, PairScoreMode::LabelTable) => {
                self.target_vocab(block) * self.source_vocab(block).unwrap()
            }
        };
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(&self.hidden);
        widths.push(output);
        widths
    }
}

/// One dense layer; weights are row-major, one row per output unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer declared {}x{} but holds {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.weight[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.bias[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// A feed-forward perceptron: ReLU between hidden layers, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Zero-weight network with the given widths, input first.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("MLP has no layers".into()));
        }
        for layer in &self.layers {
            layer.check()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer output width {} does not chain into input width {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.pop().unwrap())
    }

    /// Forward pass keeping every activation, input first and output last.
    /// Used by reverse-mode accumulation.
    pub fn forward_trace(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} does not match first layer width {}",
                input.len(),
                self.in_dim()
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.affine(&acts[l], &mut out);
            if l != last {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        Ok(acts)
    }
}

/// The learnable scoring parameters: seven MLP blocks plus the seed that
/// initialized them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub arch: ModelArch,
    pub seed: u64,
    pub h_o: Mlp,
    pub h_p: Mlp,
    pub g_op: Mlp,
    pub g_oo: Mlp,
    pub g_og: Mlp,
    pub g_po: Mlp,
    pub g_pg: Mlp,
}

impl FeatureModel {
    /// Seeded init: weights and biases drawn uniformly from
    /// (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut model = Self::zeros_unchecked(&arch, seed);
        for block in BlockId::ALL {
            for layer in &mut model.block_mut(block).layers {
                let scale = 1.0 / (layer.in_dim as f64).sqrt();
                for w in &mut layer.weight {
                    *w = rng.random_range(-scale..scale);
                }
                for b in &mut layer.bias {
                    *b = rng.random_range(-scale..scale);
                }
            }
        }
        Ok(model)
    }

    /// All-zero model; every potential it produces is zero.
    pub fn zeros(arch: ModelArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self::zeros_unchecked(&arch, 0))
    }

    fn zeros_unchecked(arch: &ModelArch, seed: u64) -> Self {
        let mlp = |block| Mlp::zeros(&arch.widths(block));
        FeatureModel {
            arch: arch.clone(),
            seed,
            h_o: mlp(BlockId::HObject),
            h_p: mlp(BlockId::HPredicate),
            g_op: mlp(BlockId::GOp),
            g_oo: mlp(BlockId::GOo),
            g_og: mlp(BlockId::GOg),
            g_po: mlp(BlockId::GPo),
            g_pg: mlp(BlockId::GPg),
        }
    }

    pub fn block(&self, id: BlockId) -> &Mlp {
        match id {
            BlockId::HObject => &self.h_o,
            BlockId::HPredicate => &self.h_p,
            BlockId::GOp => &self.g_op,
            BlockId::GOo => &self.g_oo,
            BlockId::GOg => &self.g_og,
            BlockId::GPo => &self.g_po,
            BlockId::GPg => &self.g_pg,
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut Mlp {
        match id {
            BlockId::HObject => &mut self.h_o,
            BlockId::HPredicate => &mut self.h_p,
            BlockId::GOp => &mut self.g_op,
            BlockId::GOo => &mut self.g_oo,
            BlockId::GOg => &mut self.g_og,
            BlockId::GPo => &mut self.g_po,
            BlockId::GPg => &mut self.g_pg,
        }
    }

    /// Checks blocks against the declared architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for block in BlockId::ALL {
            let mlp = self.block(block);
            mlp.check_chain()?;
            let widths = self.arch.widths(block);
            if mlp.in_dim() != widths[0] || mlp.out_dim() != *widths.last().unwrap() {
                return Err(Error::ShapeMismatch(format!(
                    "block {} is {}x{} but the architecture wants {}x{}",
                    block.name(),
                    mlp.in_dim(),
                    mlp.out_dim(),
                    widths[0],
                    widths.last().unwrap()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FeatureModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Unary score vector of an object or predicate node.
pub fn unary_potential(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    node: NodeId,
) -> Result<Vec<f64>> {
    let block = match node.kind {
        NodeKind::Object => BlockId::HObject,
        NodeKind::Predicate => BlockId::HPredicate,
        NodeKind::Global => return Err(Error::UnsupportedNodeKind("global")),
    };
    let out = model.block(block).forward(instance.features(node)?)?;
    check_finite(&out, "unary potential")?;
    Ok(out)
}

/// Checks that `(target, source, kind)` is an adjacency of the instance with
/// a non-global target, and returns the pair-block input vector. The input
/// concatenation order follows the blocks' argument conventions: the target's
/// features come first except for `Po`, whose block consumes (object,
/// predicate) pairs in that order.
fn pair_input(
    instance: &SceneGraphInstance,
    target: NodeId,
    source: NodeId,
    kind: EdgeKind,
) -> Result<Vec<f64>> {
    let bad = || {
        Error::InvalidAdjacency(format!(
            "({target}, {source}) is not a {} adjacency",
            kind.label()
        ))
    };
    let ok = match kind {
        EdgeKind::Op => {
            target.kind == NodeKind::Object
                && source.kind == NodeKind::Predicate
                && instance
                    .predicate_endpoints(source.index)
                    .map(|(s, o)| s == target.index || o == target.index)
                    .unwrap_or(false)
        }
        EdgeKind::Oo => {
            target.kind == NodeKind::Object && source.kind == NodeKind::Object && {
                let pair = (target.index.min(source.index), target.index.max(source.index));
                target.index != source.index && instance.object_edges().contains(&pair)
            }
        }
        EdgeKind::Og => {
            target.kind == NodeKind::Object
                && source.kind == NodeKind::Global
                && instance.contains(source)
        }
        EdgeKind::Po => {
            target.kind == NodeKind::Predicate
                && source.kind == NodeKind::Object
                && instance
                    .predicate_endpoints(target.index)
                    .map(|(s, o)| s == source.index || o == source.index)
                    .unwrap_or(false)
        }
        EdgeKind::Pg => {
            target.kind == NodeKind::Predicate
                && source.kind == NodeKind::Global
                && instance.contains(source)
        }
    };
    if !ok || !instance.contains(target) {
        return Err(bad());
    }
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

/// Pairwise potential of an adjacency as a row-major target-by-source table.
/// In source-invariant mode every column repeats the block output.
pub fn pair_potential(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    target: NodeId,
    source: NodeId,
    kind: EdgeKind,
) -> Result<Vec<f64>> {
    let input = pair_input(instance, target, source, kind)?;
    let block = BlockId::for_edge(kind);
    let out = model.block(block).forward(&input)?;
    check_finite(&out, "pair potential")?;
    let v_t = model.arch.target_vocab(block);
    let v_s = model.arch.source_vocab(block).unwrap();
    match model.arch.pair_mode {
        PairScoreMode::LabelTable => Ok(out),
        PairScoreMode::SourceInvariant => {
            let mut table = Vec::with_capacity(v_t * v_s);
            for &value in out.iter().take(v_t) {
                table.extend(std::iter::repeat_n(value, v_s));
            }
            Ok(table)
        }
    }
}

/// Message term of an adjacency: the pairwise potential summed over the
/// source node's vocabulary, one entry per target label. In source-invariant
/// mode this is the block output scaled by the source vocabulary size.
pub fn message_term(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    target: NodeId,
    source: NodeId,
    kind: EdgeKind,
) -> Result<Vec<f64>> {
    let input = pair_input(instance, target, source, kind)?;
    let block = BlockId::for_edge(kind);
    let out = model.block(block).forward(&input)?;
    check_finite(&out, "message term")?;
    let v_s = model.arch.source_vocab(block).unwrap();
    match model.arch.pair_mode {
        PairScoreMode::SourceInvariant => Ok(out.iter().map(|&u| v_s as f64 * u).collect()),
        PairScoreMode::LabelTable => {
            let v_t = model.arch.target_vocab(block);
            let mut msg = vec![0.0; v_t];
            for (zt, m) in msg.iter_mut().enumerate() {
                for zs in 0..v_s {
                    *m += out[zt * v_s + zs];
                }
            }
            Ok(msg)
        }
    }
}

/// Marginal log score of a node: the negated sum of its unary potential and
/// all incoming message terms.
pub fn node_marginal_log_score(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    node: NodeId,
) -> Result<Vec<f64>> {
    let mut total = unary_potential(model, instance, node)?;
    for (source, kind) in instance.neighbors(node)? {
        let msg = message_term(model, instance, node, source, kind)?;
        for (t, m) in total.iter_mut().zip(&msg) {
            *t += m;
        }
    }
    for t in &mut total {
        *t = -*t;
    }
    Ok(total)
}

/// Joint log score of a full assignment: the negated sum over labelled nodes
/// of their unary potentials and every directed pairwise potential grounded
/// at the assigned labels.
pub fn joint_log_score(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    assignment: &LabelAssignment,
) -> Result<f64> {
    assignment.validate(instance, true)?;
    let mut total = 0.0;
    for node in instance.labeled_node_ids() {
        let z_t = assignment.label_of(node).unwrap();
        total += unary_potential(model, instance, node)?[z_t];
        for (source, kind) in instance.neighbors(node)? {
            let block = BlockId::for_edge(kind);
            let v_s = model.arch.source_vocab(block).unwrap();
            let z_s = assignment
                .label_of(source)
                .ok_or_else(|| Error::IncompleteAssignment(format!("no label for {source}")))?;
            let table = pair_potential(model, instance, node, source, kind)?;
            total += table[z_t * v_s + z_s];
        }
    }
    Ok(-total)
}

/// Materialized unary potentials and message terms for a whole instance.
///
/// Message keys are `(target, kind, source)`; only object and predicate nodes
/// receive messages, and every neighbour triple of such a node has exactly
/// one entry.
#[derive(Clone, Debug)]
pub struct PotentialSet {
    unary: BTreeMap<NodeId, Vec<f64>>,
    messages: BTreeMap<(NodeId, EdgeKind, NodeId), Vec<f64>>,
}

impl PotentialSet {
    pub fn materialize(model: &FeatureModel, instance: &SceneGraphInstance) -> Result<Self> {
        let mut unary = BTreeMap::new();
        let mut messages = BTreeMap::new();
        for node in instance.labeled_node_ids() {
            unary.insert(node, unary_potential(model, instance, node)?);
            for (source, kind) in instance.neighbors(node)? {
                let msg = message_term(model, instance, node, source, kind)?;
                messages.insert((node, kind, source), msg);
            }
        }
        Ok(PotentialSet { unary, messages })
    }

    pub fn unary(&self, node: NodeId) -> Option<&[f64]> {
        self.unary.get(&node).map(|v| v.as_slice())
    }

    pub fn message(&self, target: NodeId, kind: EdgeKind, source: NodeId) -> Option<&[f64]> {
        self.messages.get(&(target, kind, source)).map(|v| v.as_slice())
    }

    pub fn num_messages(&self) -> usize {
        self.messages.len()
    }

    /// Marginal log score assembled from the stored terms.
    pub fn node_marginal_log_score(&self, node: NodeId) -> Result<Vec<f64>> {
        let mut total = self.unary.get(&node).cloned().ok_or(Error::UnknownNode(node))?;
        for ((target, _, _), msg) in self.messages.range((node, EdgeKind::Op, NodeId::object(0))..) {
            if *target != node {
                break;
            }
            for (t, m) in total.iter_mut().zip(msg) {
                *t += m;
            }
        }
        for t in &mut total {
            *t = -*t;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::PredicateDef;

    fn triplet_instance(d: usize, vocab: VocabSizes) -> SceneGraphInstance {
        let base = |shift: f64| (0..d).map(|i| 0.1 * i as f64 + shift).collect::<Vec<_>>();
        SceneGraphInstance::build(
            d,
            vocab,
            vec![base(0.0), base(1.0)],
            vec![PredicateDef { subject: 0, object: 1, features: base(2.0) }],
            vec![(0, 1)],
            vec![base(3.0)],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_forward_is_bias() {
        let mut mlp = Mlp::zeros(&[3, 2]);
        mlp.layers[0].bias = vec![0.5, -1.5];
        assert_eq!(mlp.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_forward() {
        let mut mlp = Mlp::zeros(&[3, 3]);
        for i in 0..3 {
            mlp.layers[0].weight[i * 3 + i] = 1.0;
        }
        let u = vec![0.3, -0.7, 2.0];
        assert_eq!(mlp.forward(&u).unwrap(), u);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // oracle uses explicit index loops on purpose
    fn forward_matches_handrolled_oracle() {
        let arch = ModelArch::new(4, VocabSizes::new(3, 2, 2), vec![5]);
        let model = FeatureModel::init(arch, 42).unwrap();
        let input: Vec<f64> = (0..4).map(|i| (i as f64) * 0.25 - 0.4).collect();

        // independent forward pass with explicit loops
        let mlp = &model.h_o;
        let mut hidden = [0.0; 5];
        for r in 0..5 {
            let mut acc = mlp.layers[0].bias[r];
            for c in 0..4 {
                acc += mlp.layers[0].weight[r * 4 + c] * input[c];
            }
            hidden[r] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut expected = vec![0.0; 3];
        for r in 0..3 {
            let mut acc = mlp.layers[1].bias[r];
            for c in 0..5 {
                acc += mlp.layers[1].weight[r * 5 + c] * hidden[c];
            }
            expected[r] = acc;
        }

        let got = mlp.forward(&input).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let mlp = Mlp::zeros(&[3, 2]);
        assert!(matches!(mlp.forward(&[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unary_shapes_and_zero_model() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::zeros(ModelArch::new(4, vocab, vec![5])).unwrap();
        assert_eq!(unary_potential(&model, &instance, NodeId::object(0)).unwrap(), vec![0.0; 3]);
        assert_eq!(
            unary_potential(&model, &instance, NodeId::predicate(0)).unwrap().len(),
            2
        );
        assert!(matches!(
            unary_potential(&model, &instance, NodeId::global(0)),
            Err(Error::UnsupportedNodeKind(_))
        ));
    }

    #[test]
    fn message_is_vocab_scaled_block_output() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::init(ModelArch::new(4, vocab, vec![5]), 7).unwrap();

        let target = NodeId::object(0);
        let source = NodeId::predicate(0);
        let input = {
            let mut v = instance.features(target).unwrap().to_vec();
            v.extend_from_slice(instance.features(source).unwrap());
            v
        };
        let g_out = model.g_op.forward(&input).unwrap();
        let msg = message_term(&model, &instance, target, source, EdgeKind::Op).unwrap();
        for (m, u) in msg.iter().zip(&g_out) {
            assert!((m - vocab.v_p as f64 * u).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_source_vocab_message_equals_block_output() {
        let vocab = VocabSizes::new(3, 2, 1);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::init(ModelArch::new(4, vocab, vec![5]), 7).unwrap();
        let target = NodeId::object(1);
        let source = NodeId::global(0);
        let input = {
            let mut v = instance.features(target).unwrap().to_vec();
            v.extend_from_slice(instance.features(source).unwrap());
            v
        };
        let g_out = model.g_og.forward(&input).unwrap();
        let msg = message_term(&model, &instance, target, source, EdgeKind::Og).unwrap();
        assert_eq!(msg, g_out);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn message_matches_per_label_enumeration() {
        // brute-force the marginalization in both pair-score modes
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        for mode in [PairScoreMode::SourceInvariant, PairScoreMode::LabelTable] {
            let arch = ModelArch::new(4, vocab, vec![5]).with_pair_mode(mode);
            let model = FeatureModel::init(arch, 7).unwrap();
            for (target, source, kind) in [
                (NodeId::object(0), NodeId::predicate(0), EdgeKind::Op),
                (NodeId::object(0), NodeId::object(1), EdgeKind::Oo),
                (NodeId::predicate(0), NodeId::object(1), EdgeKind::Po),
                (NodeId::predicate(0), NodeId::global(0), EdgeKind::Pg),
            ] {
                let table = pair_potential(&model, &instance, target, source, kind).unwrap();
                let msg = message_term(&model, &instance, target, source, kind).unwrap();
                let v_s = model.arch.source_vocab(BlockId::for_edge(kind)).unwrap();
                for (zt, m) in msg.iter().enumerate() {
                    let brute: f64 = (0..v_s).map(|zs| table[zt * v_s + zs]).sum();
                    assert!((m - brute).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_adjacency_rejected() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::zeros(ModelArch::new(4, vocab, vec![])).unwrap();
        // objects 0 and 1 share an edge, but predicate 0 does not touch a
        // non-endpoint object; og with an object source is also invalid
        assert!(matches!(
            message_term(&model, &instance, NodeId::object(0), NodeId::object(0), EdgeKind::Oo),
            Err(Error::InvalidAdjacency(_))
        ));
        assert!(matches!(
            message_term(&model, &instance, NodeId::object(0), NodeId::object(1), EdgeKind::Og),
            Err(Error::InvalidAdjacency(_))
        ));
        assert!(matches!(
            message_term(&model, &instance, NodeId::global(0), NodeId::object(0), EdgeKind::Og),
            Err(Error::InvalidAdjacency(_))
        ));
    }

    #[test]
    fn isolated_object_marginal_is_negated_unary() {
        let vocab = VocabSizes::new(3, 2, 1);
        let instance = SceneGraphInstance::build(
            2,
            vocab,
            vec![vec![0.4, -0.2]],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let model = FeatureModel::init(ModelArch::new(2, vocab, vec![4]), 3).unwrap();
        let unary = unary_potential(&model, &instance, NodeId::object(0)).unwrap();
        let marginal = node_marginal_log_score(&model, &instance, NodeId::object(0)).unwrap();
        for (m, u) in marginal.iter().zip(&unary) {
            assert!((m + u).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_model_marginal_is_zero() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::zeros(ModelArch::new(4, vocab, vec![5])).unwrap();
        for node in instance.labeled_node_ids() {
            let marginal = node_marginal_log_score(&model, &instance, node).unwrap();
            assert!(marginal.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_model_joint_is_zero() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::zeros(ModelArch::new(4, vocab, vec![5])).unwrap();
        let mut assignment = LabelAssignment::new(vec![2, 1], vec![0]);
        assignment.global_labels = Some(vec![1]);
        assert_eq!(joint_log_score(&model, &instance, &assignment).unwrap(), 0.0);
    }

    #[test]
    fn single_object_joint_is_negated_unary_entry() {
        let vocab = VocabSizes::new(3, 2, 1);
        let instance = SceneGraphInstance::build(
            2,
            vocab,
            vec![vec![0.4, -0.2]],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let model = FeatureModel::init(ModelArch::new(2, vocab, vec![4]), 11).unwrap();
        let unary = unary_potential(&model, &instance, NodeId::object(0)).unwrap();
        for (z, &u) in unary.iter().enumerate() {
            let assignment = LabelAssignment::new(vec![z], vec![]);
            let joint = joint_log_score(&model, &instance, &assignment).unwrap();
            assert!((joint + u).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_requires_global_labels() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::zeros(ModelArch::new(4, vocab, vec![])).unwrap();
        let assignment = LabelAssignment::new(vec![0, 0], vec![0]);
        assert!(matches!(
            joint_log_score(&model, &instance, &assignment),
            Err(Error::IncompleteAssignment(_))
        ));
    }

    #[test]
    fn final_layer_scaling_scales_unary() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let mut model = FeatureModel::init(ModelArch::new(4, vocab, vec![5]), 21).unwrap();
        let before = unary_potential(&model, &instance, NodeId::object(0)).unwrap();
        let last = model.h_o.layers.len() - 1;
        for w in &mut model.h_o.layers[last].weight {
            *w *= 3.0;
        }
        for b in &mut model.h_o.layers[last].bias {
            *b *= 3.0;
        }
        let after = unary_potential(&model, &instance, NodeId::object(0)).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_set_is_complete_and_consistent() {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = triplet_instance(4, vocab);
        let model = FeatureModel::init(ModelArch::new(4, vocab, vec![5]), 13).unwrap();
        let potentials = PotentialSet::materialize(&model, &instance).unwrap();

        let mut expected_messages = 0;
        for node in instance.labeled_node_ids() {
            assert!(potentials.unary(node).is_some());
            for (source, kind) in instance.neighbors(node).unwrap() {
                expected_messages += 1;
                let stored = potentials.message(node, kind, source).unwrap();
                let direct = message_term(&model, &instance, node, source, kind).unwrap();
                assert_eq!(stored, direct.as_slice());
            }
            let assembled = potentials.node_marginal_log_score(node).unwrap();
            let direct = node_marginal_log_score(&model, &instance, node).unwrap();
            for (a, b) in assembled.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(potentials.num_messages(), expected_messages);
    }

    #[test]
    fn model_json_round_trip() {
        let arch = ModelArch::new(4, VocabSizes::new(3, 2, 2), vec![5])
            .with_pair_mode(PairScoreMode::LabelTable);
        let model = FeatureModel::init(arch, 99).unwrap();
        let text = model.to_json().unwrap();
        let parsed = FeatureModel::from_json(&text).unwrap();
        assert_eq!(parsed, model);
        assert_eq!(parsed.seed, 99);
    }
}

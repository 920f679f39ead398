//! Scene-graph factor model: node kinds, triplet adjacency, vocabularies and
//! label assignments.
//!
//! An instance holds three families of nodes. Object nodes carry entity
//! features, predicate nodes connect an ordered (subject, object) pair of
//! objects, and global nodes provide shared context adjacent to everything.
//! Instances are immutable after construction and safe to share across
//! threads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum-to-one tolerance for probability vectors.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Predicate,
    Global,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Object => "object",
            NodeKind::Predicate => "predicate",
            NodeKind::Global => "global",
        }
    }
}

/// A node reference: kind plus a dense per-kind index.
///
/// Ordering follows the deterministic traversal order of an instance:
/// objects first, then predicates, then globals, each by ascending index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeId {
    pub fn object(index: usize) -> Self {
        NodeId { kind: NodeKind::Object, index }
    }

    pub fn predicate(index: usize) -> Self {
        NodeId { kind: NodeKind::Predicate, index }
    }

    pub fn global(index: usize) -> Self {
        NodeId { kind: NodeKind::Global, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            NodeKind::Object => 'o',
            NodeKind::Predicate => 'p',
            NodeKind::Global => 'g',
        };
        write!(f, "{tag}{}", self.index)
    }
}

/// The five directed pairwise-interaction kinds. The first letter names the
/// message target, the second the source: `Op` is a predicate-to-object
/// message, `Po` the object-to-predicate direction of the same adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Op,
    Oo,
    Og,
    Po,
    Pg,
}

impl EdgeKind {
    pub fn label(self) -> &'static str {
        match self {
            EdgeKind::Op => "op",
            EdgeKind::Oo => "oo",
            EdgeKind::Og => "og",
            EdgeKind::Po => "po",
            EdgeKind::Pg => "pg",
        }
    }

    /// Kind seen from the other endpoint of the same adjacency.
    pub fn mirrored(self) -> EdgeKind {
        match self {
            EdgeKind::Op => EdgeKind::Po,
            EdgeKind::Po => EdgeKind::Op,
            other => other,
        }
    }
}

/// Vocabulary sizes for the three node families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub v_o: usize,
    pub v_p: usize,
    pub v_g: usize,
}

impl VocabSizes {
    pub fn new(v_o: usize, v_p: usize, v_g: usize) -> Self {
        VocabSizes { v_o, v_p, v_g }
    }

    pub fn for_kind(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Object => self.v_o,
            NodeKind::Predicate => self.v_p,
            NodeKind::Global => self.v_g,
        }
    }
}

/// Predicate node under construction: ordered endpoints plus features.
#[derive(Clone, Debug, PartialEq)]
pub struct PredicateDef {
    pub subject: usize,
    pub object: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct PredicateNode {
    subject: usize,
    object: usize,
    features: Vec<f64>,
}

/// An immutable scene-graph instance over which inference runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraphInstance {
    d: usize,
    vocab: VocabSizes,
    object_features: Vec<Vec<f64>>,
    predicates: Vec<PredicateNode>,
    /// Normalized (lo, hi) pairs, sorted and unique.
    object_edges: Vec<(usize, usize)>,
    global_features: Vec<Vec<f64>>,
}

impl SceneGraphInstance {
    /// Validates and assembles an instance. Node ids are assigned densely per
    /// kind in the order the feature vectors are given.
    pub fn build(
        d: usize,
        vocab: VocabSizes,
        object_features: Vec<Vec<f64>>,
        predicates: Vec<PredicateDef>,
        object_edges: Vec<(usize, usize)>,
        global_features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInstance("feature dimension must be positive".into()));
        }
        if vocab.v_o < 2 || vocab.v_p < 2 || vocab.v_g < 1 {
            return Err(Error::InvalidInstance(format!(
                "vocabulary sizes (v_o={}, v_p={}, v_g={}) below minimums (2, 2, 1)",
                vocab.v_o, vocab.v_p, vocab.v_g
            )));
        }
        let m = object_features.len();
        if m == 0 {
            return Err(Error::InvalidInstance("instance needs at least one object".into()));
        }
        let n = predicates.len();
        let max_predicates = m * m - m;
        if n > max_predicates {
            return Err(Error::InvalidInstance(format!(
                "{n} predicates exceed the m^2 - m = {max_predicates} bound for m = {m} objects"
            )));
        }

        let check_dim = |features: &[f64], what: &str, idx: usize| -> Result<()> {
            if features.len() != d {
                return Err(Error::InvalidInstance(format!(
                    "{what} {idx} has feature dimension {} but the instance declares d = {d}",
                    features.len()
                )));
            }
            if features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInstance(format!("{what} {idx} has non-finite features")));
            }
            Ok(())
        };

        for (i, features) in object_features.iter().enumerate() {
            check_dim(features, "object", i)?;
        }

        let mut seen_endpoints = BTreeSet::new();
        let mut nodes = Vec::with_capacity(n);
        for (j, def) in predicates.into_iter().enumerate() {
            if def.subject >= m || def.object >= m {
                return Err(Error::InvalidInstance(format!(
                    "predicate {j} references endpoint out of range ({}, {})",
                    def.subject, def.object
                )));
            }
            if def.subject == def.object {
                return Err(Error::InvalidInstance(format!(
                    "predicate {j} connects object {} to itself",
                    def.subject
                )));
            }
            if !seen_endpoints.insert((def.subject, def.object)) {
                return Err(Error::InvalidInstance(format!(
                    "duplicate predicate endpoints ({}, {})",
                    def.subject, def.object
                )));
            }
            check_dim(&def.features, "predicate", j)?;
            nodes.push(PredicateNode { subject: def.subject, object: def.object, features: def.features });
        }

        let mut edges = BTreeSet::new();
        for (a, b) in object_edges {
            if a >= m || b >= m {
                return Err(Error::InvalidInstance(format!("object edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::InvalidInstance(format!("object edge ({a}, {b}) is a self-loop")));
            }
            let pair = (a.min(b), a.max(b));
            if !edges.insert(pair) {
                return Err(Error::InvalidInstance(format!("duplicate object edge ({a}, {b})")));
            }
        }

        for (k, features) in global_features.iter().enumerate() {
            check_dim(features, "global", k)?;
        }

        Ok(SceneGraphInstance {
            d,
            vocab,
            object_features,
            predicates: nodes,
            object_edges: edges.into_iter().collect(),
            global_features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn vocab(&self) -> VocabSizes {
        self.vocab
    }

    pub fn num_objects(&self) -> usize {
        self.object_features.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_globals(&self) -> usize {
        self.global_features.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_objects() + self.num_predicates() + self.num_globals()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.index
            < match node.kind {
                NodeKind::Object => self.num_objects(),
                NodeKind::Predicate => self.num_predicates(),
                NodeKind::Global => self.num_globals(),
            }
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(Error::UnknownNode(node))
        }
    }

    pub fn features(&self, node: NodeId) -> Result<&[f64]> {
        self.check_node(node)?;
        Ok(match node.kind {
            NodeKind::Object => &self.object_features[node.index],
            NodeKind::Predicate => &self.predicates[node.index].features,
            NodeKind::Global => &self.global_features[node.index],
        })
    }

    /// Ordered (subject, object) endpoints of a predicate node.
    pub fn predicate_endpoints(&self, index: usize) -> Result<(usize, usize)> {
        let node = NodeId::predicate(index);
        self.check_node(node)?;
        let p = &self.predicates[index];
        Ok((p.subject, p.object))
    }

    pub fn object_edges(&self) -> &[(usize, usize)] {
        &self.object_edges
    }

    /// All node ids in deterministic traversal order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        let objects = (0..self.num_objects()).map(NodeId::object);
        let predicates = (0..self.num_predicates()).map(NodeId::predicate);
        let globals = (0..self.num_globals()).map(NodeId::global);
        objects.chain(predicates).chain(globals)
    }

    /// Object and predicate node ids, the nodes that carry labels to infer.
    pub fn labeled_node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_objects())
            .map(NodeId::object)
            .chain((0..self.num_predicates()).map(NodeId::predicate))
    }

    /// Neighbours of a node with the edge kind seen from the node's side,
    /// grouped by kind and ascending by index within each group.
    pub fn neighbors(&self, node: NodeId) -> Result<Vec<(NodeId, EdgeKind)>> {
        self.check_node(node)?;
        let mut out = Vec::new();
        match node.kind {
            NodeKind::Object => {
                let i = node.index;
                for (j, p) in self.predicates.iter().enumerate() {
                    if p.subject == i || p.object == i {
                        out.push((NodeId::predicate(j), EdgeKind::Op));
                    }
                }
                let mut linked: Vec<usize> = self
                    .object_edges
                    .iter()
                    .filter_map(|&(a, b)| {
                        if a == i {
                            Some(b)
                        } else if b == i {
                            Some(a)
                        } else {
                            None
                        }
                    })
                    .collect();
                linked.sort_unstable();
                out.extend(linked.into_iter().map(|l| (NodeId::object(l), EdgeKind::Oo)));
                out.extend((0..self.num_globals()).map(|k| (NodeId::global(k), EdgeKind::Og)));
            }
            NodeKind::Predicate => {
                let p = &self.predicates[node.index];
                out.push((NodeId::object(p.subject), EdgeKind::Po));
                out.push((NodeId::object(p.object), EdgeKind::Po));
                out.extend((0..self.num_globals()).map(|k| (NodeId::global(k), EdgeKind::Pg)));
            }
            NodeKind::Global => {
                out.extend((0..self.num_objects()).map(|i| (NodeId::object(i), EdgeKind::Og)));
                out.extend((0..self.num_predicates()).map(|j| (NodeId::predicate(j), EdgeKind::Pg)));
            }
        }
        Ok(out)
    }
}

/// Discrete labels for an instance, indexed densely per kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub object_labels: Vec<usize>,
    pub predicate_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_labels: Option<Vec<usize>>,
}

impl LabelAssignment {
    pub fn new(object_labels: Vec<usize>, predicate_labels: Vec<usize>) -> Self {
        LabelAssignment { object_labels, predicate_labels, global_labels: None }
    }

    pub fn label_of(&self, node: NodeId) -> Option<usize> {
        match node.kind {
            NodeKind::Object => self.object_labels.get(node.index).copied(),
            NodeKind::Predicate => self.predicate_labels.get(node.index).copied(),
            NodeKind::Global => self.global_labels.as_ref()?.get(node.index).copied(),
        }
    }

    /// Checks coverage of the instance's object/predicate nodes and label
    /// ranges. With `require_globals`, global labels must cover the instance's
    /// global nodes as well.
    pub fn validate(&self, instance: &SceneGraphInstance, require_globals: bool) -> Result<()> {
        let vocab = instance.vocab();
        if self.object_labels.len() != instance.num_objects() {
            return Err(Error::IncompleteAssignment(format!(
                "{} object labels for {} objects",
                self.object_labels.len(),
                instance.num_objects()
            )));
        }
        if self.predicate_labels.len() != instance.num_predicates() {
            return Err(Error::IncompleteAssignment(format!(
                "{} predicate labels for {} predicates",
                self.predicate_labels.len(),
                instance.num_predicates()
            )));
        }
        for (i, &z) in self.object_labels.iter().enumerate() {
            if z >= vocab.v_o {
                return Err(Error::LabelOutOfRange(format!("object {i} label {z} >= v_o = {}", vocab.v_o)));
            }
        }
        for (j, &z) in self.predicate_labels.iter().enumerate() {
            if z >= vocab.v_p {
                return Err(Error::LabelOutOfRange(format!(
                    "predicate {j} label {z} >= v_p = {}",
                    vocab.v_p
                )));
            }
        }
        match &self.global_labels {
            Some(labels) => {
                if labels.len() != instance.num_globals() {
                    return Err(Error::IncompleteAssignment(format!(
                        "{} global labels for {} globals",
                        labels.len(),
                        instance.num_globals()
                    )));
                }
                for (k, &z) in labels.iter().enumerate() {
                    if z >= vocab.v_g {
                        return Err(Error::LabelOutOfRange(format!(
                            "global {k} label {z} >= v_g = {}",
                            vocab.v_g
                        )));
                    }
                }
            }
            None => {
                if require_globals && instance.num_globals() > 0 {
                    return Err(Error::IncompleteAssignment(
                        "global labels required but missing".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {p} is negative or non-finite")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}, not 1")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution needs a positive length");
        Distribution { probs: vec![1.0 / len as f64; len] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// JSON wire format. Ids are explicit in the files and must match the dense
// per-kind ordering.

#[derive(Serialize, Deserialize)]
struct WireNode {
    id: usize,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WirePredicate {
    id: usize,
    subject: usize,
    object: usize,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireGroundTruth {
    objects: Vec<usize>,
    predicates: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WireInstance {
    d: usize,
    v_o: usize,
    v_p: usize,
    v_g: usize,
    objects: Vec<WireNode>,
    predicates: Vec<WirePredicate>,
    object_edges: Vec<(usize, usize)>,
    globals: Vec<WireNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<WireGroundTruth>,
}

/// Serializes an instance (optionally with its ground truth) to JSON.
pub fn instance_to_json(
    instance: &SceneGraphInstance,
    ground_truth: Option<&LabelAssignment>,
) -> Result<String> {
    let vocab = instance.vocab();
    let wire = WireInstance {
        d: instance.feature_dim(),
        v_o: vocab.v_o,
        v_p: vocab.v_p,
        v_g: vocab.v_g,
        objects: instance
            .object_features
            .iter()
            .enumerate()
            .map(|(id, features)| WireNode { id, features: features.clone() })
            .collect(),
        predicates: instance
            .predicates
            .iter()
            .enumerate()
            .map(|(id, p)| WirePredicate {
                id,
                subject: p.subject,
                object: p.object,
                features: p.features.clone(),
            })
            .collect(),
        object_edges: instance.object_edges.clone(),
        globals: instance
            .global_features
            .iter()
            .enumerate()
            .map(|(id, features)| WireNode { id, features: features.clone() })
            .collect(),
        ground_truth: ground_truth.map(|gt| WireGroundTruth {
            objects: gt.object_labels.clone(),
            predicates: gt.predicate_labels.clone(),
        }),
    };
    Ok(serde_json::to_string_pretty(&wire)?)
}

/// Parses and validates an instance from the JSON wire format.
pub fn instance_from_json(text: &str) -> Result<(SceneGraphInstance, Option<LabelAssignment>)> {
    let wire: WireInstance = serde_json::from_str(text)?;
    for (pos, node) in wire.objects.iter().enumerate() {
        if node.id != pos {
            return Err(Error::InvalidInstance(format!("object id {} at position {pos}", node.id)));
        }
    }
    for (pos, node) in wire.predicates.iter().enumerate() {
        if node.id != pos {
            return Err(Error::InvalidInstance(format!(
                "predicate id {} at position {pos}",
                node.id
            )));
        }
    }
    for (pos, node) in wire.globals.iter().enumerate() {
        if node.id != pos {
            return Err(Error::InvalidInstance(format!("global id {} at position {pos}", node.id)));
        }
    }
    let instance = SceneGraphInstance::build(
        wire.d,
        VocabSizes::new(wire.v_o, wire.v_p, wire.v_g),
        wire.objects.into_iter().map(|n| n.features).collect(),
        wire.predicates
            .into_iter()
            .map(|p| PredicateDef { subject: p.subject, object: p.object, features: p.features })
            .collect(),
        wire.object_edges,
        wire.globals.into_iter().map(|n| n.features).collect(),
    )?;
    let ground_truth = match wire.ground_truth {
        Some(gt) => {
            let labels = LabelAssignment::new(gt.objects, gt.predicates);
            labels.validate(&instance, false)?;
            Some(labels)
        }
        None => None,
    };
    Ok((instance, ground_truth))
}

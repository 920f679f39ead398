//! Independent oracles for the scoring path.
//!
//! Everything here re-implements the definitions from scratch: explicit-loop
//! MLP forwards, adjacency re-derived from the raw instance structure, and
//! marginalization by enumerating source vocabularies term by term. Nothing
//! reuses the library's message or marginal code.

#![allow(clippy::needless_range_loop)] // oracles use explicit index loops on purpose

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use sgvi_core::factor_graph::{
    LabelAssignment, NodeId, PredicateDef, SceneGraphInstance, VocabSizes,
};
use sgvi_core::inference::exact_gibbs_marginals;
use sgvi_core::scoring::{
    joint_log_score, node_marginal_log_score, FeatureModel, Mlp, ModelArch, PairScoreMode,
};

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Explicit-loop forward pass: ReLU between hidden layers, linear output.
fn oracle_forward(mlp: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut current = input.to_vec();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.out_dim];
        for r in 0..layer.out_dim {
            let mut acc = layer.bias[r];
            for c in 0..layer.in_dim {
                acc += layer.weight[r * layer.in_dim + c] * current[c];
            }
            next[r] = if l < last && acc < 0.0 { 0.0 } else { acc };
        }
        current = next;
    }
    current
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

/// Grounded pairwise potential, re-derived from the mode definition.
fn oracle_pair(
    model: &FeatureModel,
    out: &[f64],
    v_s: usize,
    z_t: usize,
    z_s: usize,
) -> f64 {
    match model.arch.pair_mode {
        PairScoreMode::SourceInvariant => out[z_t],
        PairScoreMode::LabelTable => out[z_t * v_s + z_s],
    }
}

struct OracleEdges {
    /// (g output, source vocabulary) per incoming adjacency.
    terms: Vec<(Vec<f64>, usize)>,
}

/// Incoming adjacencies of a node, re-derived from endpoints, object edges
/// and the global roster.
fn oracle_incoming(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    node: NodeId,
) -> OracleEdges {
    let vocab = instance.vocab();
    let feat = |n: NodeId| instance.features(n).unwrap();
    let mut terms = Vec::new();
    match node.kind {
        sgvi_core::factor_graph::NodeKind::Object => {
            let i = node.index;
            for j in 0..instance.num_predicates() {
                let (s, o) = instance.predicate_endpoints(j).unwrap();
                if s == i || o == i {
                    let input = concat(feat(node), feat(NodeId::predicate(j)));
                    terms.push((oracle_forward(&model.g_op, &input), vocab.v_p));
                }
            }
            for &(a, b) in instance.object_edges() {
                let other = if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                };
                if let Some(l) = other {
                    let input = concat(feat(node), feat(NodeId::object(l)));
                    terms.push((oracle_forward(&model.g_oo, &input), vocab.v_o));
                }
            }
            for k in 0..instance.num_globals() {
                let input = concat(feat(node), feat(NodeId::global(k)));
                terms.push((oracle_forward(&model.g_og, &input), vocab.v_g));
            }
        }
        sgvi_core::factor_graph::NodeKind::Predicate => {
            let (s, o) = instance.predicate_endpoints(node.index).unwrap();
            for endpoint in [s, o] {
                let input = concat(feat(NodeId::object(endpoint)), feat(node));
                terms.push((oracle_forward(&model.g_po, &input), vocab.v_o));
            }
            for k in 0..instance.num_globals() {
                let input = concat(feat(node), feat(NodeId::global(k)));
                terms.push((oracle_forward(&model.g_pg, &input), vocab.v_g));
            }
        }
        sgvi_core::factor_graph::NodeKind::Global => unreachable!(),
    }
    OracleEdges { terms }
}

/// Marginal log score by brute-force enumeration over every source
/// vocabulary for every incoming term.
fn oracle_marginal(model: &FeatureModel, instance: &SceneGraphInstance, node: NodeId) -> Vec<f64> {
    let unary_block = match node.kind {
        sgvi_core::factor_graph::NodeKind::Object => &model.h_o,
        sgvi_core::factor_graph::NodeKind::Predicate => &model.h_p,
        _ => unreachable!(),
    };
    let unary = oracle_forward(unary_block, instance.features(node).unwrap());
    let incoming = oracle_incoming(model, instance, node);
    let v_t = unary.len();
    let mut scores = vec![0.0; v_t];
    for (z_t, slot) in scores.iter_mut().enumerate() {
        let mut total = unary[z_t];
        for (out, v_s) in &incoming.terms {
            for z_s in 0..*v_s {
                total += oracle_pair(model, out, *v_s, z_t, z_s);
            }
        }
        *slot = -total;
    }
    scores
}

/// Joint log score expanded by hand over the object and predicate blocks.
fn oracle_joint(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
    labels: &LabelAssignment,
) -> f64 {
    let mut total = 0.0;
    for node in instance.labeled_node_ids() {
        let z_t = labels.label_of(node).unwrap();
        let unary_block = match node.kind {
            sgvi_core::factor_graph::NodeKind::Object => &model.h_o,
            _ => &model.h_p,
        };
        total += oracle_forward(unary_block, instance.features(node).unwrap())[z_t];
        let incoming = oracle_incoming(model, instance, node);
        // re-derive the source labels in the same adjacency order
        let mut sources = Vec::new();
        match node.kind {
            sgvi_core::factor_graph::NodeKind::Object => {
                let i = node.index;
                for j in 0..instance.num_predicates() {
                    let (s, o) = instance.predicate_endpoints(j).unwrap();
                    if s == i || o == i {
                        sources.push(labels.predicate_labels[j]);
                    }
                }
                for &(a, b) in instance.object_edges() {
                    if a == i || b == i {
                        let other = if a == i { b } else { a };
                        sources.push(labels.object_labels[other]);
                    }
                }
                for k in 0..instance.num_globals() {
                    sources.push(labels.global_labels.as_ref().unwrap()[k]);
                }
            }
            _ => {
                let (s, o) = instance.predicate_endpoints(node.index).unwrap();
                sources.push(labels.object_labels[s]);
                sources.push(labels.object_labels[o]);
                for k in 0..instance.num_globals() {
                    sources.push(labels.global_labels.as_ref().unwrap()[k]);
                }
            }
        }
        for ((out, v_s), z_s) in incoming.terms.iter().zip(sources) {
            total += oracle_pair(model, out, *v_s, z_t, z_s);
        }
    }
    -total
}

/// Random tiny instance: 2-3 objects, up to 3 predicates, up to 2 globals,
/// occasional extra object edges beyond the predicate endpoints.
fn random_tiny_instance(r: &mut ChaCha12Rng, vocab: VocabSizes, d: usize) -> SceneGraphInstance {
    let m = r.random_range(2..=3);
    let feats = |r: &mut ChaCha12Rng| (0..d).map(|_| r.random_range(-1.5..1.5)).collect::<Vec<_>>();
    let objects: Vec<Vec<f64>> = (0..m).map(|_| feats(r)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let n = r.random_range(1..=3.min(pairs.len()));
    for i in (1..pairs.len()).rev() {
        let j = r.random_range(0..=i);
        pairs.swap(i, j);
    }
    pairs.truncate(n);
    let predicates: Vec<PredicateDef> = pairs
        .iter()
        .map(|&(subject, object)| PredicateDef { subject, object, features: feats(r) })
        .collect();
    let mut edges = std::collections::BTreeSet::new();
    for &(a, b) in &pairs {
        edges.insert((a.min(b), a.max(b)));
    }
    if m == 3 && r.random::<bool>() {
        edges.insert((0, 2));
    }
    let globals: Vec<Vec<f64>> = (0..r.random_range(0..=2)).map(|_| feats(r)).collect();
    SceneGraphInstance::build(d, vocab, objects, predicates, edges.into_iter().collect(), globals)
        .unwrap()
}

fn random_labels(r: &mut ChaCha12Rng, instance: &SceneGraphInstance) -> LabelAssignment {
    let vocab = instance.vocab();
    let mut labels = LabelAssignment::new(
        (0..instance.num_objects()).map(|_| r.random_range(0..vocab.v_o)).collect(),
        (0..instance.num_predicates()).map(|_| r.random_range(0..vocab.v_p)).collect(),
    );
    labels.global_labels =
        Some((0..instance.num_globals()).map(|_| r.random_range(0..vocab.v_g)).collect());
    labels
}

#[test]
fn marginal_matches_enumeration_oracle_on_random_tiny_instances() {
    let mut r = rng(20);
    for case in 0..40 {
        let vocab = VocabSizes::new(r.random_range(2..=4), r.random_range(2..=4), r.random_range(1..=3));
        let d = r.random_range(2..=4);
        let instance = random_tiny_instance(&mut r, vocab, d);
        let mode = if case % 2 == 0 { PairScoreMode::SourceInvariant } else { PairScoreMode::LabelTable };
        let arch = ModelArch::new(d, vocab, vec![4]).with_pair_mode(mode);
        let model = FeatureModel::init(arch, 100 + case).unwrap();
        for node in instance.labeled_node_ids() {
            let got = node_marginal_log_score(&model, &instance, node).unwrap();
            let expected = oracle_marginal(&model, &instance, node);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-10, "node {node}: {g} vs {e}");
            }
        }
    }
}

fn fixture_instance() -> SceneGraphInstance {
    SceneGraphInstance::build(
        3,
        VocabSizes::new(3, 2, 2),
        vec![vec![0.2, -0.5, 0.9], vec![-1.1, 0.4, 0.0]],
        vec![PredicateDef { subject: 0, object: 1, features: vec![0.7, 0.1, -0.3] }],
        vec![(0, 1)],
        vec![vec![0.25, -0.15, 0.6]],
    )
    .unwrap()
}

#[test]
fn seed_13_fixture_marginal_matches_term_by_term_oracle() {
    let instance = fixture_instance();
    let arch = ModelArch::new(3, instance.vocab(), vec![5]);
    let model = FeatureModel::init(arch, 13).unwrap();
    for node in instance.labeled_node_ids() {
        let got = node_marginal_log_score(&model, &instance, node).unwrap();
        let expected = oracle_marginal(&model, &instance, node);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10);
        }
    }
}

#[test]
fn seed_13_fixture_joint_matches_hand_expansion() {
    let instance = fixture_instance();
    let arch = ModelArch::new(3, instance.vocab(), vec![5]);
    let model = FeatureModel::init(arch, 13).unwrap();
    let mut labels = LabelAssignment::new(vec![2, 0], vec![1]);
    labels.global_labels = Some(vec![1]);
    let got = joint_log_score(&model, &instance, &labels).unwrap();
    let expected = oracle_joint(&model, &instance, &labels);
    assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
}

#[test]
fn joint_matches_hand_expansion_on_random_instances() {
    let mut r = rng(21);
    for case in 0..30 {
        let vocab = VocabSizes::new(r.random_range(2..=4), r.random_range(2..=4), r.random_range(1..=3));
        let d = r.random_range(2..=4);
        let instance = random_tiny_instance(&mut r, vocab, d);
        let mode = if case % 2 == 0 { PairScoreMode::SourceInvariant } else { PairScoreMode::LabelTable };
        let arch = ModelArch::new(d, vocab, vec![4]).with_pair_mode(mode);
        let model = FeatureModel::init(arch, 300 + case).unwrap();
        for _ in 0..5 {
            let labels = random_labels(&mut r, &instance);
            let got = joint_log_score(&model, &instance, &labels).unwrap();
            let expected = oracle_joint(&model, &instance, &labels);
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }
}

/// Marginals by enumerating the hand-expanded joint, the slowest possible
/// route, to cross-check the enumeration oracle itself.
fn oracle_gibbs(
    model: &FeatureModel,
    instance: &SceneGraphInstance,
) -> std::collections::BTreeMap<NodeId, Vec<f64>> {
    let vocab = instance.vocab();
    let nodes: Vec<NodeId> = instance.node_ids().collect();
    let radices: Vec<usize> = nodes.iter().map(|n| vocab.for_kind(n.kind)).collect();
    let mut digits = vec![0usize; nodes.len()];
    let mut weights: Vec<Vec<f64>> = radices.iter().map(|&v| vec![0.0; v]).collect();
    let mut scores = Vec::new();
    loop {
        let mut objects = Vec::new();
        let mut predicates = Vec::new();
        let mut globals = Vec::new();
        for (node, &z) in nodes.iter().zip(&digits) {
            match node.kind {
                sgvi_core::factor_graph::NodeKind::Object => objects.push(z),
                sgvi_core::factor_graph::NodeKind::Predicate => predicates.push(z),
                sgvi_core::factor_graph::NodeKind::Global => globals.push(z),
            }
        }
        let mut labels = LabelAssignment::new(objects, predicates);
        labels.global_labels = Some(globals);
        scores.push((digits.clone(), oracle_joint(model, instance, &labels)));

        let mut carry = true;
        for (d, &r) in digits.iter_mut().zip(&radices) {
            *d += 1;
            if *d < r {
                carry = false;
                break;
            }
            *d = 0;
        }
        if carry {
            break;
        }
    }
    let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    for (digits, score) in &scores {
        let w = (score - max).exp();
        for (slot, &z) in weights.iter_mut().zip(digits) {
            slot[z] += w;
        }
    }
    nodes
        .into_iter()
        .zip(weights)
        .map(|(node, mut w)| {
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            (node, w)
        })
        .collect()
}

#[test]
fn exact_gibbs_matches_independent_enumeration() {
    let mut r = rng(22);
    for case in 0..6 {
        let vocab = VocabSizes::new(3, 2, 2);
        let instance = random_tiny_instance(&mut r, vocab, 2);
        let mode = if case % 2 == 0 { PairScoreMode::SourceInvariant } else { PairScoreMode::LabelTable };
        let arch = ModelArch::new(2, vocab, vec![3]).with_pair_mode(mode);
        let model = FeatureModel::init(arch, 500 + case).unwrap();
        let got = exact_gibbs_marginals(&model, &instance).unwrap();
        let expected = oracle_gibbs(&model, &instance);
        for (node, dist) in &got {
            for (a, b) in dist.probs().iter().zip(&expected[node]) {
                assert!((a - b).abs() < 1e-10, "node {node}");
            }
        }
    }
}

//! Python bindings: the instance and model types plus the inference and
//! generation entry points, enough to drive the library from Python.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sgvi_core::factor_graph::{
    instance_from_json, instance_to_json, Distribution, LabelAssignment, NodeId, NodeKind,
    SceneGraphInstance, VocabSizes,
};
use sgvi_core::inference as inf;
use sgvi_core::inference::{EmdConfig, InitMode, VariationalState};
use sgvi_core::scoring::{self, FeatureModel, ModelArch, PairScoreMode};
use sgvi_core::synthdata::{self, GeneratorConfig};

fn value_error(error: sgvi_core::Error) -> PyErr {
    PyValueError::new_err(error.to_string())
}

fn parse_kind(kind: &str) -> PyResult<NodeKind> {
    match kind {
        "object" => Ok(NodeKind::Object),
        "predicate" => Ok(NodeKind::Predicate),
        "global" => Ok(NodeKind::Global),
        other => Err(PyValueError::new_err(format!(
            "unknown node kind {other:?}; expected object, predicate or global"
        ))),
    }
}

fn parse_pair_mode(mode: &str) -> PyResult<PairScoreMode> {
    match mode {
        "source-invariant" => Ok(PairScoreMode::SourceInvariant),
        "label-table" => Ok(PairScoreMode::LabelTable),
        other => Err(PyValueError::new_err(format!(
            "unknown pair score mode {other:?}; expected source-invariant or label-table"
        ))),
    }
}

fn parse_init_mode(mode: &str) -> PyResult<InitMode> {
    match mode {
        "uniform" => Ok(InitMode::Uniform),
        "random" => Ok(InitMode::Random),
        other => Err(PyValueError::new_err(format!(
            "unknown init mode {other:?}; expected uniform or random"
        ))),
    }
}

/// A labelled scene-graph instance.
#[pyclass(name = "Instance", skip_from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: SceneGraphInstance,
    labels: Option<LabelAssignment>,
}

#[pymethods]
impl PyInstance {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (inner, labels) = instance_from_json(text).map_err(value_error)?;
        Ok(PyInstance { inner, labels })
    }

    fn to_json(&self) -> PyResult<String> {
        instance_to_json(&self.inner, self.labels.as_ref()).map_err(value_error)
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.inner.num_objects()
    }

    #[getter]
    fn num_predicates(&self) -> usize {
        self.inner.num_predicates()
    }

    #[getter]
    fn num_globals(&self) -> usize {
        self.inner.num_globals()
    }

    /// (v_o, v_p, v_g)
    #[getter]
    fn vocab(&self) -> (usize, usize, usize) {
        let v = self.inner.vocab();
        (v.v_o, v.v_p, v.v_g)
    }

    /// Planted labels as {"objects": [...], "predicates": [...]}, if any.
    fn ground_truth<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        match &self.labels {
            None => Ok(None),
            Some(labels) => {
                let dict = PyDict::new(py);
                dict.set_item("objects", labels.object_labels.clone())?;
                dict.set_item("predicates", labels.predicate_labels.clone())?;
                Ok(Some(dict))
            }
        }
    }

    /// Neighbours of a node as (kind, index, edge_kind) triples.
    fn neighbors(&self, kind: &str, index: usize) -> PyResult<Vec<(String, usize, String)>> {
        let node = NodeId { kind: parse_kind(kind)?, index };
        let neighbors = self.inner.neighbors(node).map_err(value_error)?;
        Ok(neighbors
            .into_iter()
            .map(|(n, e)| (n.kind.name().to_string(), n.index, e.label().to_string()))
            .collect())
    }

    fn features(&self, kind: &str, index: usize) -> PyResult<Vec<f64>> {
        let node = NodeId { kind: parse_kind(kind)?, index };
        Ok(self.inner.features(node).map_err(value_error)?.to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance(objects={}, predicates={}, globals={})",
            self.inner.num_objects(),
            self.inner.num_predicates(),
            self.inner.num_globals()
        )
    }
}

/// The MLP feature model producing all potentials.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: FeatureModel,
}

#[pymethods]
impl PyModel {
    /// Seeded random initialization.
    #[staticmethod]
    #[pyo3(signature = (d, v_o, v_p, v_g, hidden = vec![32], seed = 0, pair_score_mode = "source-invariant"))]
    fn init(
        d: usize,
        v_o: usize,
        v_p: usize,
        v_g: usize,
        hidden: Vec<usize>,
        seed: u64,
        pair_score_mode: &str,
    ) -> PyResult<Self> {
        let arch = ModelArch::new(d, VocabSizes::new(v_o, v_p, v_g), hidden)
            .with_pair_mode(parse_pair_mode(pair_score_mode)?);
        Ok(PyModel { inner: FeatureModel::init(arch, seed).map_err(value_error)? })
    }

    /// All-zero model: every potential is zero, posteriors are uniform.
    #[staticmethod]
    #[pyo3(signature = (d, v_o, v_p, v_g, hidden = vec![32], pair_score_mode = "source-invariant"))]
    fn zeros(
        d: usize,
        v_o: usize,
        v_p: usize,
        v_g: usize,
        hidden: Vec<usize>,
        pair_score_mode: &str,
    ) -> PyResult<Self> {
        let arch = ModelArch::new(d, VocabSizes::new(v_o, v_p, v_g), hidden)
            .with_pair_mode(parse_pair_mode(pair_score_mode)?);
        Ok(PyModel { inner: FeatureModel::zeros(arch).map_err(value_error)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel { inner: FeatureModel::from_json(text).map_err(value_error)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_error)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(d={}, hidden={:?}, seed={})",
            self.inner.arch.d, self.inner.arch.hidden, self.inner.seed
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn generator_config(
    seed: u64,
    m_range: (usize, usize),
    predicate_density: f64,
    v_o: usize,
    v_p: usize,
    v_g: usize,
    d: usize,
    zipf_exponent: f64,
    class_margin: f64,
    globals_per_instance: usize,
) -> GeneratorConfig {
    GeneratorConfig {
        m_range,
        predicate_density,
        v_o,
        v_p,
        v_g,
        d,
        zipf_exponent,
        class_margin,
        globals_per_instance,
        seed,
    }
}

/// Draws one labelled synthetic instance from the generator stream
/// `instance_index` of `seed`.
#[pyfunction]
#[pyo3(signature = (seed, instance_index = 0, m_range = (3, 5), predicate_density = 0.5,
    v_o = 10, v_p = 8, v_g = 16, d = 16, zipf_exponent = 1.0, class_margin = 10.0,
    globals_per_instance = 1))]
#[allow(clippy::too_many_arguments)]
fn sample_instance(
    seed: u64,
    instance_index: u64,
    m_range: (usize, usize),
    predicate_density: f64,
    v_o: usize,
    v_p: usize,
    v_g: usize,
    d: usize,
    zipf_exponent: f64,
    class_margin: f64,
    globals_per_instance: usize,
) -> PyResult<PyInstance> {
    let config = generator_config(
        seed,
        m_range,
        predicate_density,
        v_o,
        v_p,
        v_g,
        d,
        zipf_exponent,
        class_margin,
        globals_per_instance,
    );
    let mut rng = synthdata::seeded_stream_rng(seed, instance_index);
    let sample = synthdata::sample_instance(&config, &mut rng).map_err(value_error)?;
    Ok(PyInstance { inner: sample.instance, labels: Some(sample.labels) })
}

/// Linear-discriminant model for the planted classes of a generator config.
#[pyfunction]
#[pyo3(signature = (seed, m_range = (3, 5), predicate_density = 0.5, v_o = 10, v_p = 8,
    v_g = 16, d = 16, zipf_exponent = 1.0, class_margin = 10.0, globals_per_instance = 1))]
#[allow(clippy::too_many_arguments)]
fn oracle_model(
    seed: u64,
    m_range: (usize, usize),
    predicate_density: f64,
    v_o: usize,
    v_p: usize,
    v_g: usize,
    d: usize,
    zipf_exponent: f64,
    class_margin: f64,
    globals_per_instance: usize,
) -> PyResult<PyModel> {
    let config = generator_config(
        seed,
        m_range,
        predicate_density,
        v_o,
        v_p,
        v_g,
        d,
        zipf_exponent,
        class_margin,
        globals_per_instance,
    );
    Ok(PyModel { inner: synthdata::oracle_model(&config).map_err(value_error)? })
}

/// Marginal log-score vector of one node.
#[pyfunction]
fn node_marginal_log_score(
    model: &PyModel,
    instance: &PyInstance,
    kind: &str,
    index: usize,
) -> PyResult<Vec<f64>> {
    let node = NodeId { kind: parse_kind(kind)?, index };
    scoring::node_marginal_log_score(&model.inner, &instance.inner, node).map_err(value_error)
}

/// Joint log score of a full assignment.
#[pyfunction]
#[pyo3(signature = (model, instance, objects, predicates, globals = None))]
fn joint_log_score(
    model: &PyModel,
    instance: &PyInstance,
    objects: Vec<usize>,
    predicates: Vec<usize>,
    globals: Option<Vec<usize>>,
) -> PyResult<f64> {
    let mut assignment = LabelAssignment::new(objects, predicates);
    assignment.global_labels = globals;
    scoring::joint_log_score(&model.inner, &instance.inner, &assignment).map_err(value_error)
}

#[pyfunction]
fn elbo(scores: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let q = Distribution::new(q).map_err(value_error)?;
    inf::elbo(&scores, &q).map_err(value_error)
}

#[pyfunction]
fn log_sum_exp(values: Vec<f64>) -> f64 {
    inf::log_sum_exp(&values)
}

/// Closed-form optimum of the per-node objective.
#[pyfunction]
fn softmax_oracle(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(inf::softmax_oracle(&scores).map_err(value_error)?.into_vec())
}

/// One exponentiated-gradient step on the simplex.
#[pyfunction]
fn emd_step(q: Vec<f64>, gradient: Vec<f64>, learning_rate: f64) -> PyResult<Vec<f64>> {
    let q = Distribution::new(q).map_err(value_error)?;
    Ok(inf::emd_step(&q, &gradient, learning_rate).map_err(value_error)?.into_vec())
}

fn emd_config(
    max_iterations: usize,
    initial_learning_rate: f64,
    tolerance: f64,
    init_mode: &str,
) -> PyResult<EmdConfig> {
    Ok(EmdConfig {
        max_iterations,
        initial_learning_rate,
        tolerance,
        init_mode: parse_init_mode(init_mode)?,
    })
}

fn state_to_dict<'py>(py: Python<'py>, state: &VariationalState) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    dict.set_item("q", state.q.probs().to_vec())?;
    dict.set_item("converged", state.converged)?;
    dict.set_item("iterations_used", state.iterations_used)?;
    dict.set_item("best_elbo", state.best_elbo())?;
    let trace: Vec<(usize, f64, f64)> =
        state.trace.iter().map(|t| (t.iteration, t.elbo, t.learning_rate)).collect();
    dict.set_item("trace", trace)?;
    Ok(dict)
}

/// Entropic mirror descent over the simplex.
#[pyfunction]
#[pyo3(signature = (scores, max_iterations = 20, initial_learning_rate = 1.0,
    tolerance = 1e-4, init_mode = "random", seed = 0))]
fn emd_infer<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    max_iterations: usize,
    initial_learning_rate: f64,
    tolerance: f64,
    init_mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = emd_config(max_iterations, initial_learning_rate, tolerance, init_mode)?;
    let mut rng = synthdata::seeded_rng(seed);
    let state = inf::emd_infer(&scores, &config, &mut rng).map_err(value_error)?;
    state_to_dict(py, &state)
}

/// Projected gradient ascent baseline with the same stopping rule.
#[pyfunction]
#[pyo3(signature = (scores, max_iterations = 20, initial_learning_rate = 1.0,
    tolerance = 1e-4, init_mode = "random", seed = 0))]
fn pgd_infer<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    max_iterations: usize,
    initial_learning_rate: f64,
    tolerance: f64,
    init_mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = emd_config(max_iterations, initial_learning_rate, tolerance, init_mode)?;
    let mut rng = synthdata::seeded_rng(seed);
    let state = inf::pgd_infer(&scores, &config, &mut rng).map_err(value_error)?;
    state_to_dict(py, &state)
}

/// Per-node posteriors for a whole instance, keyed "o0", "p1", ...
#[pyfunction]
#[pyo3(signature = (model, instance, max_iterations = 20, initial_learning_rate = 1.0,
    tolerance = 1e-4, init_mode = "random", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn infer_graph<'py>(
    py: Python<'py>,
    model: &PyModel,
    instance: &PyInstance,
    max_iterations: usize,
    initial_learning_rate: f64,
    tolerance: f64,
    init_mode: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = emd_config(max_iterations, initial_learning_rate, tolerance, init_mode)?;
    let results =
        inf::infer_graph(&model.inner, &instance.inner, &config, seed).map_err(value_error)?;
    let dict = PyDict::new(py);
    for (node, inference) in results {
        let entry = PyDict::new(py);
        entry.set_item("kind", node.kind.name())?;
        entry.set_item("index", node.index)?;
        entry.set_item("map_label", inference.posterior.map_label)?;
        entry.set_item("log_posterior", inference.posterior.log_posterior.clone())?;
        entry.set_item("surrogate_logit", inference.posterior.surrogate_logit.clone())?;
        entry.set_item("iterations_used", inference.state.iterations_used)?;
        entry.set_item("converged", inference.state.converged)?;
        dict.set_item(node.to_string(), entry)?;
    }
    Ok(dict)
}

/// Exact posterior marginals by joint enumeration (tiny instances only).
#[pyfunction]
fn exact_gibbs_marginals<'py>(
    py: Python<'py>,
    model: &PyModel,
    instance: &PyInstance,
) -> PyResult<Bound<'py, PyDict>> {
    let marginals =
        inf::exact_gibbs_marginals(&model.inner, &instance.inner).map_err(value_error)?;
    let dict = PyDict::new(py);
    for (node, dist) in marginals {
        dict.set_item(node.to_string(), dist.probs().to_vec())?;
    }
    Ok(dict)
}

/// Cross-entropy loss of the instance's planted labels under the model.
#[pyfunction]
fn instance_loss(model: &PyModel, instance: &PyInstance) -> PyResult<f64> {
    let labels = instance
        .labels
        .as_ref()
        .ok_or_else(|| PyValueError::new_err("instance carries no ground truth"))?;
    sgvi_core::learning::instance_loss(&model.inner, &instance.inner, labels).map_err(value_error)
}

/// 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr.
#[pyfunction]
fn weighted_score(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    sgvi_core::metrics::weighted_score(r50, wmap_rel, wmap_phr)
}

#[pymodule]
fn sgvi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_instance, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_model, m)?)?;
    m.add_function(wrap_pyfunction!(node_marginal_log_score, m)?)?;
    m.add_function(wrap_pyfunction!(joint_log_score, m)?)?;
    m.add_function(wrap_pyfunction!(elbo, m)?)?;
    m.add_function(wrap_pyfunction!(log_sum_exp, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(emd_step, m)?)?;
    m.add_function(wrap_pyfunction!(emd_infer, m)?)?;
    m.add_function(wrap_pyfunction!(pgd_infer, m)?)?;
    m.add_function(wrap_pyfunction!(infer_graph, m)?)?;
    m.add_function(wrap_pyfunction!(exact_gibbs_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(instance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_score, m)?)?;
    Ok(())
}

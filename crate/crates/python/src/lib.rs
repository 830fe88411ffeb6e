//! Python bindings for the DSM modularization toolkit.
//!
//! Partitions cross the boundary as dicts of node id to module label. Labels
//! can be any value; they are compared by their `str()`.

use std::collections::HashMap;
use std::fmt::Display;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dsmco_core::gateway::{mock_heuristic_backend, MockMode};
use dsmco_core::optimizer::{self, OptimizerConfig};
use dsmco_core::prompting::{self, InputFormat, LabelMap, PromptSpec};
use dsmco_core::reference::{brute_force_optimum as brute, sa_reference as sa, SaConfig};
use dsmco_core::{
    canonicalize, generate_random_case, load_case, metrics, CostParams, DsmCase, NodeId, Partition, SolutionRecord,
};

fn value_error(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A DSM case: named nodes and weighted directed dependencies.
#[pyclass(name = "Case", module = "dsmco", frozen)]
struct PyCase {
    inner: DsmCase,
}

#[pymethods]
impl PyCase {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        DsmCase::from_json(text).map(|inner| Self { inner }).map_err(value_error)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_case(path).map(|inner| Self { inner }).map_err(value_error)
    }

    /// Synthetic case with integer weights in `[min_weight, max_weight]`.
    #[staticmethod]
    #[pyo3(signature = (n, density, min_weight = 1, max_weight = 9, seed = 0))]
    fn random(n: usize, density: f64, min_weight: u32, max_weight: u32, seed: u64) -> PyResult<Self> {
        generate_random_case(n, density, (min_weight, max_weight), seed)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    #[getter]
    fn density(&self) -> f64 {
        self.inner.density()
    }

    #[getter]
    fn total_weight(&self) -> f64 {
        self.inner.total_weight()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().map(ToString::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Case(name={:?}, n={}, edges={})",
            self.inner.name(),
            self.inner.n(),
            self.inner.edge_count()
        )
    }
}

fn to_partition(case: &DsmCase, raw: &HashMap<String, Bound<'_, PyAny>>) -> PyResult<Partition> {
    let labeled = raw
        .iter()
        .map(|(id, label)| Ok((NodeId::new(id.as_str()), label.str()?.to_string())))
        .collect::<PyResult<Vec<_>>>()?;
    canonicalize(labeled.iter().map(|(id, l)| (id, l.as_str())), case).map_err(value_error)
}

fn partition_dict<'py>(py: Python<'py>, case: &DsmCase, p: &Partition) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (id, m) in p.named(case) {
        d.set_item(id.as_str(), m)?;
    }
    Ok(d)
}

fn params(rho: f64) -> CostParams {
    CostParams { rho }
}

#[pyfunction]
#[pyo3(signature = (case, partition, rho = 1.0))]
fn total_cost(case: &PyCase, partition: HashMap<String, Bound<'_, PyAny>>, rho: f64) -> PyResult<f64> {
    let p = to_partition(&case.inner, &partition)?;
    metrics::total_cost(&case.inner, &p, params(rho)).map_err(value_error)
}

#[pyfunction]
fn clustering_efficiency(case: &PyCase, partition: HashMap<String, Bound<'_, PyAny>>) -> PyResult<f64> {
    let p = to_partition(&case.inner, &partition)?;
    metrics::clustering_efficiency(&case.inner, &p).map_err(value_error)
}

#[pyfunction]
fn gap_percent(total_cost: f64, reference: f64) -> PyResult<f64> {
    metrics::gap_percent(total_cost, reference).map_err(value_error)
}

/// Mean, population std, min, max and count.
#[pyfunction]
fn aggregate(py: Python<'_>, values: Vec<f64>) -> PyResult<Bound<'_, PyDict>> {
    let a = metrics::aggregate(&values).map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("mean", a.mean)?;
    d.set_item("std", a.std)?;
    d.set_item("min", a.min)?;
    d.set_item("max", a.max)?;
    d.set_item("count", a.count)?;
    Ok(d)
}

/// Exhaustive optimum with at least two modules: `(cost, partition)`.
#[pyfunction]
#[pyo3(signature = (case, rho = 1.0, max_n = 12))]
fn brute_force<'py>(py: Python<'py>, case: &PyCase, rho: f64, max_n: usize) -> PyResult<(f64, Bound<'py, PyDict>)> {
    let r = py
        .detach(|| brute(&case.inner, params(rho), max_n))
        .map_err(value_error)?;
    Ok((r.best.total_cost, partition_dict(py, &case.inner, &r.best.partition)?))
}

/// Best of `restarts` simulated annealing runs: `(cost, partition)`.
#[pyfunction]
#[pyo3(signature = (case, restarts = 200, seed = 0, rho = 1.0))]
fn sa_reference<'py>(
    py: Python<'py>,
    case: &PyCase,
    restarts: usize,
    seed: u64,
    rho: f64,
) -> PyResult<(f64, Bound<'py, PyDict>)> {
    let config = SaConfig {
        restarts,
        rng_seed: seed,
        cost_params: params(rho),
        ..SaConfig::default()
    };
    let r = py.detach(|| sa(&case.inner, &config)).map_err(value_error)?;
    Ok((r.best.total_cost, partition_dict(py, &case.inner, &r.best.partition)?))
}

fn prompt_spec(k: u8, format: &str, formula: bool, p: usize, q: usize, seed: u64, rho: f64) -> PyResult<PromptSpec> {
    if k > 1 {
        return Err(PyValueError::new_err(format!("k must be 0 or 1, got {k}")));
    }
    Ok(PromptSpec {
        input_format: format.parse::<InputFormat>().map_err(value_error)?,
        knowledge: k == 1,
        include_formula: formula,
        pool_best_p: p,
        pool_random_q: q,
        shuffle_seed: seed,
        rho,
    })
}

/// First-iteration prompt with the singleton solution base.
///
/// Returns `(system, user, labels)` where `labels` maps node ids to the
/// anonymized labels used in the text.
#[pyfunction]
#[pyo3(signature = (case, k = 0, format = "directed_edge_list", formula = true, seed = 0, rho = 1.0))]
fn render_prompt<'py>(
    py: Python<'py>,
    case: &PyCase,
    k: u8,
    format: &str,
    formula: bool,
    seed: u64,
    rho: f64,
) -> PyResult<(String, String, Bound<'py, PyDict>)> {
    let spec = prompt_spec(k, format, formula, 5, 5, seed, rho)?;
    let singleton = Partition::singleton(case.inner.n());
    let init = SolutionRecord {
        total_cost: metrics::total_cost(&case.inner, &singleton, params(rho)).map_err(value_error)?,
        partition: singleton,
        iteration_found: 0,
    };
    let rendered = prompting::render_prompt(&case.inner, &spec, &[], &[init], 1).map_err(value_error)?;
    let labels = PyDict::new(py);
    for (id, label) in rendered.label_map.pairs(&case.inner) {
        labels.set_item(id.as_str(), label)?;
    }
    Ok((rendered.system_message, rendered.user_message, labels))
}

/// Parses a model response against a `node id -> label` map as returned by
/// `render_prompt`. Raises `ValueError` for unusable responses.
#[pyfunction]
fn parse_response<'py>(
    py: Python<'py>,
    case: &PyCase,
    text: &str,
    labels: HashMap<String, String>,
) -> PyResult<Bound<'py, PyDict>> {
    let ordered = case
        .inner
        .node_ids()
        .map(|id| {
            labels
                .get(id.as_str())
                .cloned()
                .ok_or_else(|| PyValueError::new_err(format!("no label for node {id}")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let map = LabelMap::from_labels(ordered).ok_or_else(|| PyValueError::new_err("labels must be distinct"))?;
    let p = optimizer::parse_response(text, &map, &case.inner).map_err(value_error)?;
    partition_dict(py, &case.inner, &p)
}

fn mock_mode(mode: &str) -> PyResult<MockMode> {
    match mode {
        "random" => Ok(MockMode::RandomMove),
        "oracle" => Ok(MockMode::OracleOnceThenRandom),
        other => Err(PyValueError::new_err(format!(
            "unknown mock mode {other:?}, expected \"random\" or \"oracle\""
        ))),
    }
}

/// Runs the optimization loop against a deterministic mock backend.
#[pyfunction]
#[pyo3(signature = (case, iterations = 30, mode = "random", seed = 0, k = 0, format = "directed_edge_list", formula = true, p = 5, q = 5, rho = 1.0))]
#[allow(clippy::too_many_arguments)]
fn run_mock<'py>(
    py: Python<'py>,
    case: &PyCase,
    iterations: usize,
    mode: &str,
    seed: u64,
    k: u8,
    format: &str,
    formula: bool,
    p: usize,
    q: usize,
    rho: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = OptimizerConfig {
        iterations,
        prompt_spec: prompt_spec(k, format, formula, p, q, 0, rho)?,
        cost_params: params(rho),
        master_seed: seed,
        ..OptimizerConfig::default()
    };
    let backend = mock_heuristic_backend(&case.inner, mock_mode(mode)?, seed).map_err(value_error)?;
    let trace = py
        .detach(|| optimizer::run(&case.inner, &config, &backend))
        .map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("initial_cost", trace.initial_cost)?;
    d.set_item("best_cost", trace.best.total_cost)?;
    d.set_item("best_iteration", trace.best.iteration_found)?;
    d.set_item("best_partition", partition_dict(py, &case.inner, &trace.best.partition)?)?;
    d.set_item("best_so_far", trace.best_curve())?;
    d.set_item("invalid_count", trace.invalid_count)?;
    Ok(d)
}

#[pymodule]
fn dsmco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCase>()?;
    m.add_function(wrap_pyfunction!(total_cost, m)?)?;
    m.add_function(wrap_pyfunction!(clustering_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(gap_percent, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(sa_reference, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock, m)?)?;
    Ok(())
}

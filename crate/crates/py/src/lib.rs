//! Python bindings. Built with maturin as the `dapfl` extension module.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList};

use dapfl::affinity::{build_affinity_matrix, overlapping_vectors, raw_affinity as raw};
use dapfl::aggregation::{fedavg_global_weights, strategy_weights, Kernel, WeightContext};
use dapfl::config::KEYS;
use dapfl::engine::{run_experiment_with, weights_csv, RunOptions};
use dapfl::metrics::EvalRecord;
use dapfl::{ClassStats, Error, ExperimentConfig, Layout, ParamVector, Strategy};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn stats(counts: Vec<Vec<u64>>) -> PyResult<Vec<ClassStats>> {
    counts
        .into_iter()
        .map(|c| ClassStats::new(c).map_err(to_py))
        .collect()
}

/// Text form of a Python value as the config parser expects it.
fn config_value(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = v.cast::<PyBool>() {
        return Ok(b.is_true().to_string());
    }
    if let Ok(list) = v.cast::<PyList>() {
        let parts = list
            .iter()
            .map(|x| Ok(x.str()?.to_string()))
            .collect::<PyResult<Vec<_>>>()?;
        return Ok(parts.join(","));
    }
    Ok(v.str()?.to_string())
}

/// Experiment configuration. Keyword arguments override the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                inner
                    .set(&k.extract::<String>()?, &config_value(&v)?)
                    .map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_text(text)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        KEYS.to_vec()
    }

    /// Copy with `key=value` overrides applied.
    #[pyo3(signature = (**kwargs))]
    fn replace(&self, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                inner
                    .set(&k.extract::<String>()?, &config_value(&v)?)
                    .map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for line in self.inner.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                d.set_item(k, v)?;
            }
        }
        Ok(d)
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds
    }

    #[getter]
    fn n_clients(&self) -> usize {
        self.inner.n_clients
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(strategy={:?}, n_clients={}, rounds={}, seed={})",
            self.inner.strategy.name(),
            self.inner.n_clients,
            self.inner.rounds,
            self.inner.seed
        )
    }

    /// Runs the experiment and returns its metrics as a dict.
    #[pyo3(signature = (dump_weights = false))]
    fn run<'py>(&self, py: Python<'py>, dump_weights: bool) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.inner.clone();
        let log = py
            .detach(|| run_experiment_with(&cfg, RunOptions { dump_weights }))
            .map_err(to_py)?;

        let s = &log.summary;
        let summary = PyDict::new(py);
        summary.set_item("strategy", &s.strategy)?;
        summary.set_item("alpha", s.alpha)?;
        summary.set_item("seed", s.seed)?;
        summary.set_item("last10_avg_acc", s.last_avg)?;
        summary.set_item("last10_many", s.last_many)?;
        summary.set_item("last10_medium", s.last_medium)?;
        summary.set_item("last10_few", s.last_few)?;
        let rtt = PyDict::new(py);
        for (t, r) in &s.rounds_to_target {
            rtt.set_item(t, r)?;
        }
        summary.set_item("rounds_to_target", rtt)?;

        let rounds = PyList::empty(py);
        for r in &log.round_metrics {
            let row = PyDict::new(py);
            row.set_item("round", r.round)?;
            row.set_item("avg_acc", r.avg_acc)?;
            row.set_item("many", r.many)?;
            row.set_item("medium", r.medium)?;
            row.set_item("few", r.few)?;
            rounds.append(row)?;
        }

        let out = PyDict::new(py);
        out.set_item("summary", summary)?;
        out.set_item("rounds", rounds)?;
        out.set_item("affinity", log.affinity.to_rows())?;
        out.set_item(
            "class_counts",
            log.stats
                .iter()
                .map(|c| c.counts().to_vec())
                .collect::<Vec<_>>(),
        )?;
        out.set_item("rounds_csv", log.rounds_csv())?;
        out.set_item("summary_csv", log.summary_csv())?;
        if dump_weights {
            out.set_item("weights_csv", weights_csv(&log.weights))?;
        }
        Ok(out)
    }
}

/// Raw affinity of two class-count vectors; `None` when they share no class.
#[pyfunction]
fn raw_affinity(a: Vec<u64>, b: Vec<u64>) -> PyResult<Option<f64>> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("count vectors differ in length"));
    }
    let k = a.len();
    let pair = overlapping_vectors(
        &ClassStats::new(a).map_err(to_py)?,
        &ClassStats::new(b).map_err(to_py)?,
    )
    .map_err(to_py)?;
    Ok(raw(&pair, k).value())
}

/// Normalized affinity matrix of a client-by-class count table.
#[pyfunction]
fn affinity_matrix(counts: Vec<Vec<u64>>) -> PyResult<Vec<Vec<f64>>> {
    let k = counts.first().map_or(0, Vec::len);
    let m = build_affinity_matrix(&stats(counts)?, k).map_err(to_py)?;
    Ok(m.to_rows())
}

/// Splits sample indices over clients; returns one index list per client.
#[pyfunction]
fn dirichlet_partition(
    labels: Vec<usize>,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    dapfl::data::dirichlet_partition(&labels, n_clients, alpha, seed)
        .map(|p| p.train)
        .map_err(to_py)
}

/// Aggregation weights of `strategy` for client `target`. `counts[j]` and
/// `models[j]` belong to client `j`; models are flat parameter vectors of a
/// common length of at least 2. For the fedavg strategies the shared
/// self-inclusive weights are returned.
#[pyfunction]
#[pyo3(signature = (strategy, target, participants, counts, models, sigma = 1.0, epsilon = 1e-8))]
fn aggregation_weights(
    strategy: &str,
    target: usize,
    participants: Vec<usize>,
    counts: Vec<Vec<u64>>,
    models: Vec<Vec<f64>>,
    sigma: f64,
    epsilon: f64,
) -> PyResult<BTreeMap<usize, f64>> {
    let strategy: Strategy = strategy.parse().map_err(to_py)?;
    let k = counts.first().map_or(0, Vec::len);
    let stats = stats(counts)?;
    let affinity = build_affinity_matrix(&stats, k).map_err(to_py)?;
    let len = models.first().map_or(0, Vec::len);
    if len < 2 {
        return Err(PyValueError::new_err(
            "models must have at least 2 parameters",
        ));
    }
    let layout = Layout::new(vec![len - 1, 1]).map_err(to_py)?;
    let models = models
        .into_iter()
        .enumerate()
        .map(|(j, v)| {
            ParamVector::from_values(layout.clone(), v)
                .map(|p| (j, p))
                .map_err(to_py)
        })
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    if strategy.includes_self() {
        return fedavg_global_weights(&participants, &stats).map_err(to_py);
    }
    let ctx = WeightContext {
        participants: &participants,
        affinity: &affinity,
        models: &models,
        stats: &stats,
        kernel: Kernel {
            sigma,
            epsilon,
            scale_distance: false,
        },
    };
    strategy_weights(strategy, target, &ctx)
        .map(|w| w.weights)
        .map_err(to_py)
}

/// First 1-based evaluation index whose accuracy reaches `target`.
#[pyfunction]
fn rounds_to_target(accuracies: Vec<f64>, target: f64) -> Option<usize> {
    let history: Vec<EvalRecord> = accuracies
        .into_iter()
        .enumerate()
        .map(|(t, a)| EvalRecord {
            round: t + 1,
            accuracy: vec![a],
            correct: Vec::new(),
            total: Vec::new(),
        })
        .collect();
    dapfl::metrics::rounds_to_target(&history, target)
}

#[pymodule]
#[pyo3(name = "dapfl")]
fn dapfl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(raw_affinity, m)?)?;
    m.add_function(wrap_pyfunction!(affinity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(aggregation_weights, m)?)?;
    m.add_function(wrap_pyfunction!(rounds_to_target, m)?)?;
    m.add(
        "STRATEGIES",
        Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}

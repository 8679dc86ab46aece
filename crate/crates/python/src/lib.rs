//! Python bindings. Structured values cross the boundary as plain
//! dicts/lists via the stdlib `json` module.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use shopsandbox_core::agents::{run_episode, score_trajectory, GreedyPolicy, OraclePolicy, Policy};
use shopsandbox_core::knowledge::{DisabledBackend, FixtureStore, KnowledgeBackend};
use shopsandbox_core::metrics::{evaluate_task, MetricsConfig};
use shopsandbox_core::sandbox::{EnvConfig, Environment, EpisodeState, ToolCall};
use shopsandbox_core::search::{Bm25Params, FieldWeights, ProductIndex};
use shopsandbox_core::taskgen::{generate_suite, FactStore, IntentKind, SuiteConfig, Task, TemplateRenderer};
use shopsandbox_core::{Catalog, Money};

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Catalog, search index and web-search fixture bundled into one sandbox.
#[pyclass(frozen, module = "shopsandbox")]
struct Sandbox {
    env: Environment,
}

#[pymethods]
impl Sandbox {
    #[new]
    #[pyo3(signature = (catalog, snippets=None, step_limit=30))]
    fn new(catalog: PathBuf, snippets: Option<PathBuf>, step_limit: usize) -> PyResult<Self> {
        let cat = Arc::new(Catalog::load(&catalog).map_err(value_err)?);
        let index = ProductIndex::build(&cat, FieldWeights::default(), Bm25Params::default()).map_err(value_err)?;
        let kb: Arc<dyn KnowledgeBackend> = match snippets {
            Some(p) => Arc::new(FixtureStore::load(p).map_err(value_err)?),
            None => Arc::new(DisabledBackend),
        };
        Ok(Sandbox { env: Environment::new(cat, Arc::new(index), kb, EnvConfig { step_limit }) })
    }

    fn __len__(&self) -> usize {
        self.env.catalog().len()
    }

    fn product(&self, py: Python<'_>, product_id: &str) -> PyResult<Option<Py<PyAny>>> {
        self.env.catalog().find(product_id).map(|p| to_py(py, p)).transpose()
    }

    /// Start an episode for a task dict (as produced by `generate_tasks`).
    fn open(&self, task: &Bound<'_, PyAny>) -> PyResult<Episode> {
        let task: Task = from_py(task)?;
        let state = self.env.start_episode(&task);
        Ok(Episode { env: self.env.clone(), task, state })
    }

    /// Run a built-in policy ("oracle" or "greedy") and return the scored trajectory.
    fn run(&self, py: Python<'_>, task: &Bound<'_, PyAny>, policy: &str) -> PyResult<Py<PyAny>> {
        let task: Task = from_py(task)?;
        let mut policy: Box<dyn Policy> = match policy {
            "oracle" => Box::new(OraclePolicy::new(&task, self.env.catalog())),
            "greedy" => Box::new(GreedyPolicy::new()),
            other => return Err(PyValueError::new_err(format!("unknown policy {other:?}"))),
        };
        let mut traj = py.detach(|| run_episode(policy.as_mut(), &self.env, &task));
        score_trajectory(&mut traj, &task, self.env.catalog(), &MetricsConfig::default()).map_err(value_err)?;
        to_py(py, &traj)
    }
}

#[pyclass(module = "shopsandbox")]
struct Episode {
    env: Environment,
    task: Task,
    state: EpisodeState,
}

#[pymethods]
impl Episode {
    #[getter]
    fn instruction(&self) -> &str {
        &self.task.instruction
    }

    #[getter]
    fn status(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.state.status)
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.state.step_count
    }

    #[getter]
    fn recommended(&self) -> Vec<String> {
        self.state.recommended.clone()
    }

    /// Execute one tool call; returns the observation dict.
    #[pyo3(signature = (name, params=None))]
    fn step(&mut self, py: Python<'_>, name: String, params: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
        let params = match params {
            Some(p) => from_py(p)?,
            None => serde_json::Map::new(),
        };
        let obs = self
            .env
            .step(&mut self.state, &ToolCall { name, params })
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        to_py(py, &obs)
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        if !self.state.status.is_terminal() {
            return Err(PyRuntimeError::new_err("episode is still running"));
        }
        let result = evaluate_task(&self.task, &self.state.recommended, self.env.catalog(), &MetricsConfig::default())
            .map_err(value_err)?;
        to_py(py, &result)
    }
}

/// Generate `count` tasks per intent from a catalog file.
#[pyfunction]
#[pyo3(signature = (catalog, count, seed=7, facts=None, intents=None))]
fn generate_tasks(
    py: Python<'_>,
    catalog: PathBuf,
    count: usize,
    seed: u64,
    facts: Option<PathBuf>,
    intents: Option<Vec<String>>,
) -> PyResult<Py<PyAny>> {
    let cat = Catalog::load(&catalog).map_err(value_err)?;
    let store = facts.map(|p| FactStore::load(p, &cat)).transpose().map_err(value_err)?;
    let mut cfg = SuiteConfig::uniform(count, seed);
    if let Some(names) = intents {
        cfg.counts.clear();
        for n in names {
            cfg.counts.insert(n.parse::<IntentKind>().map_err(value_err)?, count);
        }
    }
    let tasks = py.detach(|| generate_suite(&cat, store.as_ref(), &cfg, &TemplateRenderer)).map_err(value_err)?;
    to_py(py, &tasks)
}

/// Write a synthetic corpus into `out_dir`; returns the generation ledger.
#[pyfunction]
#[pyo3(signature = (out_dir, products=2000, shops=120, facts=60, seed=7))]
fn synthesize(py: Python<'_>, out_dir: PathBuf, products: usize, shops: usize, facts: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let corpus = shopsandbox_core::synth::generate(shopsandbox_core::synth::SynthConfig { products, shops, facts, seed });
    shopsandbox_core::synth::write_corpus(&corpus, &out_dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &corpus.ledger)
}

/// Settle a basket of decimal price strings; returns the final total as a string.
#[pyfunction]
#[pyo3(signature = (prices, shop_ids, min_total=None, discount=None))]
fn settle(prices: Vec<String>, shop_ids: Vec<String>, min_total: Option<String>, discount: Option<String>) -> PyResult<String> {
    let prices: Vec<Money> = prices.iter().map(|p| p.parse::<Money>().map_err(value_err)).collect::<PyResult<_>>()?;
    let rule = match (min_total, discount) {
        (Some(m), Some(d)) => Some(
            shopsandbox_core::VoucherRule::new(m.parse().map_err(value_err)?, d.parse().map_err(value_err)?)
                .ok_or_else(|| PyValueError::new_err("discount must be positive and below the threshold"))?,
        ),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("min_total and discount go together")),
    };
    let shops: Vec<&str> = shop_ids.iter().map(String::as_str).collect();
    let s = shopsandbox_core::apply_voucher(&prices, &shops, rule.as_ref()).map_err(value_err)?;
    Ok(s.final_total.to_string())
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    shopsandbox_core::analysis::pearson(&x, &y).map_err(value_err)
}

/// Reward of a predicted model output against a target call.
#[pyfunction]
fn tool_reward(py: Python<'_>, predicted: &str, name: String, params: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let target = ToolCall { name, params: from_py(params)? };
    let r = shopsandbox_core::distill::tool_reward(predicted, &target, Default::default());
    to_py(py, &r)
}

#[pyfunction]
fn weighted_average(rows: Vec<(f64, usize)>) -> f64 {
    shopsandbox_core::metrics::weighted_average(&rows)
}

#[pyfunction]
fn normalize(text: &str) -> String {
    shopsandbox_core::text::normalize(text)
}

#[pymodule]
fn shopsandbox(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Sandbox>()?;
    m.add_class::<Episode>()?;
    m.add_function(wrap_pyfunction!(generate_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(settle, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(tool_reward, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

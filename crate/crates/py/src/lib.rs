//! Python module `vlnfaith`: datasets, agents, training, attributions and
//! the faithfulness benchmark. Structured results are returned as plain
//! Python dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use vlnfaith::agents::{rollout, Agent as CoreAgent, AgentConfig, Architecture, Policy};
use vlnfaith::attribution::{attribute, Method, StepContext};
use vlnfaith::faitheval::{self, EvalConfig, KPolicy};
use vlnfaith::navworld::{self, Dataset as CoreDataset, DatasetConfig, Episode, SplitName, WorldConfig};
use vlnfaith::pipeline::{self, PipelineConfig};
use vlnfaith::trainer::{self, TrainConfig};

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts through JSON so Python receives dicts, lists and floats.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parses a JSON text of overrides on top of the defaults.
fn from_json<T: Default + Serialize + for<'de> serde::Deserialize<'de>>(overrides: Option<&str>) -> PyResult<T> {
    match overrides {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(value),
    }
}

fn methods(names: Option<Vec<String>>) -> PyResult<Vec<Method>> {
    match names {
        None => {
            let mut m = Method::EXPLAINERS.to_vec();
            m.push(Method::Random);
            Ok(m)
        }
        Some(v) => v.iter().map(|s| s.parse().map_err(value)).collect(),
    }
}

fn split(name: &str) -> PyResult<SplitName> {
    name.parse().map_err(value)
}

#[pyclass(module = "vlnfaith", frozen)]
struct Dataset {
    inner: CoreDataset,
}

impl Dataset {
    fn find(&self, id: &str) -> PyResult<&Episode> {
        self.inner.episodes.iter().find(|e| e.id == id).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }
}

#[pymethods]
impl Dataset {
    /// Generates a dataset; `config` is an optional JSON object of overrides.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&str>) -> PyResult<Self> {
        let cfg: DatasetConfig = from_json(config)?;
        Ok(Self { inner: CoreDataset::generate(&cfg).map_err(value)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&dir).map_err(runtime)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let prov = pipeline::provenance("python", &self.inner.config);
        self.inner.save(&dir, &prov).map_err(runtime)
    }

    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    fn episode_ids(&self, split_name: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.episodes_in(split(split_name)?).iter().map(|e| e.id.clone()).collect())
    }

    /// Instruction tokens, start, expert path and per-step rationale of one episode.
    fn episode<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyAny>> {
        let ep = self.find(id)?;
        let row = serde_json::json!({
            "id": ep.id,
            "graph": ep.graph,
            "tokens": ep.instruction.tokens(&self.inner.vocab),
            "start": ep.start,
            "path": ep.path,
            "rationale": ep.rationale,
        });
        to_py(py, &row)
    }

    fn mean_rationale_len(&self, split_name: &str) -> PyResult<f64> {
        Ok(CoreDataset::mean_rationale_len(self.inner.episodes_in(split(split_name)?)))
    }

    fn __len__(&self) -> usize {
        self.inner.episodes.len()
    }
}

#[pyclass(module = "vlnfaith")]
struct Agent {
    inner: CoreAgent,
}

#[pymethods]
impl Agent {
    /// Fresh agent of architecture `"transformer"` or `"rnn"` sized for `dataset`.
    #[new]
    #[pyo3(signature = (architecture, dataset, seed=1))]
    fn new(architecture: &str, dataset: &Dataset, seed: u64) -> PyResult<Self> {
        let arch: Architecture = architecture.parse().map_err(value)?;
        let cfg = AgentConfig::for_dataset(arch, &dataset.inner);
        Ok(Self { inner: CoreAgent::new(cfg, seed).map_err(value)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf, dataset: &Dataset) -> PyResult<Self> {
        Ok(Self { inner: pipeline::load_checkpoint_for(&dataset.inner, &dir).map_err(runtime)? })
    }

    fn save(&self, dir: PathBuf, dataset: &Dataset) -> PyResult<()> {
        vlnfaith::agents::save_checkpoint(&self.inner, &dir, &dataset.inner.vocab.hash()).map_err(runtime)
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.architecture().to_string()
    }

    /// Imitation training on the training split; returns the loss curve.
    #[pyo3(signature = (dataset, config=None))]
    fn train<'py>(&mut self, py: Python<'py>, dataset: &Dataset, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = match config {
            None => TrainConfig::for_architecture(self.inner.architecture()),
            Some(s) => serde_json::from_str(s).map_err(value)?,
        };
        let episodes = dataset.inner.episodes_in(SplitName::Train);
        let out = trainer::imitation_train(&mut self.inner, &dataset.inner, &episodes, &cfg).map_err(runtime)?;
        to_py(py, &out)
    }

    /// SR, SPL and episode count of greedy rollouts on a split.
    fn evaluate_navigation<'py>(&self, py: Python<'py>, dataset: &Dataset, split_name: &str) -> PyResult<Bound<'py, PyAny>> {
        let eps = dataset.inner.episodes_in(split(split_name)?);
        to_py(py, &trainer::evaluate_navigation(&self.inner, &dataset.inner, &eps).map_err(runtime)?)
    }

    /// Greedy trajectory: actions, path, termination and per-step distributions.
    fn rollout<'py>(&self, py: Python<'py>, dataset: &Dataset, episode: &str) -> PyResult<Bound<'py, PyAny>> {
        let ep = dataset.find(episode)?;
        let t = rollout(&self.inner, dataset.inner.graph_of(ep), &ep.instruction.ids, ep.start, Policy::Greedy).map_err(runtime)?;
        let row = serde_json::json!({
            "actions": t.actions(),
            "path": t.path,
            "termination": t.termination,
            "probs": t.steps.iter().map(|s| &s.probs).collect::<Vec<_>>(),
            "attention": t.steps.iter().map(|s| &s.alpha).collect::<Vec<_>>(),
        });
        to_py(py, &row)
    }

    /// Token scores of `method` for step `step` of the greedy trajectory.
    #[pyo3(signature = (dataset, episode, step, method, config=None))]
    fn attribute(&self, dataset: &Dataset, episode: &str, step: usize, method: &str, config: Option<&str>) -> PyResult<Vec<f64>> {
        let ep = dataset.find(episode)?;
        let graph = dataset.inner.graph_of(ep);
        let m: Method = method.parse().map_err(value)?;
        let cfg: EvalConfig = from_json(config)?;
        let traj = rollout(&self.inner, graph, &ep.instruction.ids, ep.start, Policy::Greedy).map_err(runtime)?;
        let actions = traj.actions();
        let ctx = StepContext {
            agent: &self.inner,
            graph,
            episode: ep,
            trajectory: &traj,
            actions: &actions,
            step,
            random_seed: cfg.random_seed,
        };
        Ok(attribute(m, &ctx, &cfg.attribution).map_err(value)?.scores)
    }

    /// Faithfulness benchmark on one split. Returns `{"records": [...], "aggregates": [...]}`.
    #[pyo3(signature = (dataset, split_name, methods=None, k=None, config=None))]
    fn evaluate_faithfulness<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        split_name: &str,
        methods: Option<Vec<String>>,
        k: Option<usize>,
        config: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut cfg: EvalConfig = from_json(config)?;
        if let Some(k) = k {
            cfg.k = KPolicy::Fixed(k);
        }
        let s = split(split_name)?;
        let eps = dataset.inner.episodes_in(s);
        let ms = self::methods(methods)?;
        let (records, aggregates) =
            faitheval::evaluate_methods(&self.inner, &dataset.inner, &eps, s.as_str(), &ms, &cfg).map_err(runtime)?;
        to_py(py, &serde_json::json!({ "records": records, "aggregates": aggregates }))
    }

    /// Oracle comparison on the on-path steps of one split.
    #[pyo3(signature = (dataset, split_name, methods=None, config=None))]
    fn compare_with_oracle<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        split_name: &str,
        methods: Option<Vec<String>>,
        config: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: EvalConfig = from_json(config)?;
        let s = split(split_name)?;
        let eps = dataset.inner.episodes_in(s);
        let ms = self::methods(methods)?;
        let c = faitheval::compare_with_oracle(&self.inner, &dataset.inner, &eps, s.as_str(), &ms, &cfg).map_err(runtime)?;
        to_py(py, &serde_json::json!({ "records": c.records, "aggregates": c.aggregates }))
    }
}

/// One navigation graph as a dict.
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_world<'py>(py: Python<'py>, seed: u64, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: WorldConfig = from_json(config)?;
    to_py(py, &navworld::generate_world(seed, &cfg).map_err(value)?)
}

/// Top-k token indices among the erasable positions, ascending.
#[pyfunction]
#[pyo3(signature = (scores, k, erasable, absolute=false))]
fn select_top_k(scores: Vec<f64>, k: usize, erasable: Vec<bool>, absolute: bool) -> PyResult<Vec<usize>> {
    if scores.len() != erasable.len() {
        return Err(value("scores and erasable differ in length"));
    }
    let ranking = if absolute { vlnfaith::attribution::Ranking::Absolute } else { vlnfaith::attribution::Ranking::Signed };
    Ok(faitheval::select_top_k(&scores, k, &erasable, ranking))
}

/// Full pipeline into `out`; `config` is a TOML file path.
#[pyfunction]
#[pyo3(signature = (out, config=None))]
fn run_all<'py>(py: Python<'py>, out: PathBuf, config: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: PipelineConfig = pipeline::config_or_default(config.as_deref()).map_err(value)?;
    let summary = py.detach(|| pipeline::run_all(&cfg, &out)).map_err(runtime)?;
    to_py(py, &summary)
}

#[pymodule]
#[pyo3(name = "vlnfaith")]
fn vlnfaith_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Agent>()?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add("METHODS", Method::EXPLAINERS.iter().chain(&[Method::Random, Method::Oracle]).map(|m| m.as_str()).collect::<Vec<_>>())?;
    Ok(())
}

//! File-level orchestration shared by the command-line tool and the
//! end-to-end tests. Every artifact carries a provenance header holding
//! the configuration and seeds that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{load_checkpoint, rollout, save_checkpoint, Agent, AgentConfig, AgentError, Architecture, Policy};
use crate::attribution::{attribute, AttributionError, Method, StepContext};
use crate::faitheval::{benchmark, compare_with_oracle, AggregateResult, EvalConfig, EvalError, FaithfulnessRecord};
use crate::navworld::{generate_world, Dataset, DatasetConfig, SplitName, WorldConfig, WorldError};
use crate::records::{read_records, write_document, write_records, RecordError};
use crate::report::{to_text, to_tsv, ReportEntry};
use crate::trainer::{evaluate_navigation, imitation_train, navigation_outcomes, NavMetrics, TrainConfig, TrainError};
use crate::visualize::{render_svg, HeatmapRow, VisualizeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Visualize(#[from] VisualizeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint vocabulary does not match the dataset")]
    VocabMismatch,
    #[error("{arch} agent reaches SR {sr:.3} on {split}, below the required {gate:.2}")]
    Gate { arch: Architecture, split: SplitName, sr: f64, gate: f64 },
    #[error("no episode '{0}' in the dataset")]
    UnknownEpisode(String),
    #[error("no aggregate results to report")]
    NothingToReport,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const NAV_FORMAT: &str = "vlnfaith-nav";
pub const LOSS_FORMAT: &str = "vlnfaith-loss";
pub const FAITH_FORMAT: &str = "vlnfaith-faith-records";
pub const AGG_FORMAT: &str = "vlnfaith-aggregates";
pub const GRAPH_FORMAT: &str = "vlnfaith-graph";

/// Name of the pooled validation population in aggregate files.
pub const POOLED_SPLIT: &str = "val";

pub fn provenance(command: &str, config: &impl Serialize) -> Value {
    json!({
        "tool": "vlnfaith",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a TOML configuration file; missing keys take their defaults.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| PipelineError::Config { path: path.display().to_string(), message: e.to_string() })
}

/// [`read_config`] when a path is given, defaults otherwise.
pub fn config_or_default<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

/// Everything the default end-to-end run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub agent_seed: u64,
    pub architectures: Vec<Architecture>,
    pub transformer_train: TrainConfig,
    pub rnn_train: TrainConfig,
    pub eval: EvalConfig,
    pub methods: Vec<Method>,
    pub gate_split: SplitName,
    pub sr_gate: f64,
    pub eval_splits: Vec<SplitName>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut methods = Method::EXPLAINERS.to_vec();
        methods.push(Method::Random);
        Self {
            dataset: DatasetConfig::default(),
            agent_seed: 1,
            architectures: Architecture::ALL.to_vec(),
            transformer_train: TrainConfig::for_architecture(Architecture::Transformer),
            rnn_train: TrainConfig::for_architecture(Architecture::Rnn),
            eval: EvalConfig::default(),
            methods,
            gate_split: SplitName::ValSeen,
            sr_gate: 0.8,
            eval_splits: vec![SplitName::ValSeen, SplitName::ValUnseen],
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self, arch: Architecture) -> &TrainConfig {
        match arch {
            Architecture::Transformer => &self.transformer_train,
            Architecture::Rnn => &self.rnn_train,
        }
    }
}

pub fn gen_world(seed: u64, config: &WorldConfig, out: &Path) -> Result<()> {
    let graph = generate_world(seed, config)?;
    let prov = provenance("gen-world", &json!({ "seed": seed, "world": config }));
    write_document(out, GRAPH_FORMAT, &prov, &graph)?;
    Ok(())
}

pub fn gen_data(config: &DatasetConfig, out: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(config)?;
    ds.save(out, &provenance("gen-data", config))?;
    Ok(ds)
}

fn load_agent(dataset: &Dataset, checkpoint: &Path, arch: Option<Architecture>) -> Result<Agent> {
    let (agent, vocab_hash) = load_checkpoint(checkpoint, arch)?;
    if vocab_hash != dataset.vocab.hash() {
        return Err(PipelineError::VocabMismatch);
    }
    Ok(agent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: SplitName,
    pub metrics: NavMetrics,
}

/// Trains a fresh agent, writing `checkpoint/`, `loss.jsonl` and `nav.jsonl` into `out`.
pub fn train(
    dataset: &Dataset,
    arch: Architecture,
    agent_seed: u64,
    config: &TrainConfig,
    out: &Path,
) -> Result<(Agent, Vec<SplitMetrics>)> {
    let mut agent = Agent::new(AgentConfig::for_dataset(arch, dataset), agent_seed)?;
    let outcome = imitation_train(&mut agent, dataset, &dataset.episodes_in(SplitName::Train), config)?;
    let prov = provenance(
        "train",
        &json!({ "architecture": arch, "agent_seed": agent_seed, "train": config, "dataset": dataset.config, "agent": agent.config }),
    );
    save_checkpoint(&agent, &out.join("checkpoint"), &dataset.vocab.hash())?;
    let mut rows = vec![json!({ "epoch": 0, "loss": outcome.initial_loss })];
    rows.extend(outcome.curve.iter().map(|e| json!(e)));
    write_records(&out.join("loss.jsonl"), LOSS_FORMAT, &prov, rows)?;
    let metrics = eval_nav(dataset, &agent, &SplitName::ALL, &out.join("nav.jsonl"), &prov)?;
    Ok((agent, metrics))
}

/// Greedy navigation metrics per split, with per-episode outcomes.
pub fn eval_nav(dataset: &Dataset, agent: &Agent, splits: &[SplitName], out: &Path, prov: &Value) -> Result<Vec<SplitMetrics>> {
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for &split in splits {
        let episodes = dataset.episodes_in(split);
        if episodes.is_empty() {
            continue;
        }
        let outcomes = navigation_outcomes(agent, dataset, &episodes)?;
        let m = NavMetrics::from_outcomes(&outcomes)?;
        rows.push(json!({ "split": split, "kind": "summary", "sr": m.sr, "spl": m.spl, "episodes": m.episodes }));
        rows.extend(outcomes.iter().map(|o| json!({ "split": split, "kind": "episode", "outcome": o })));
        metrics.push(SplitMetrics { split, metrics: m });
    }
    write_records(out, NAV_FORMAT, prov, rows)?;
    Ok(metrics)
}

pub fn eval_nav_checkpoint(data: &Path, checkpoint: &Path, splits: &[SplitName], out: &Path) -> Result<Vec<SplitMetrics>> {
    let dataset = Dataset::load(data)?;
    let agent = load_agent(&dataset, checkpoint, None)?;
    let prov = provenance("eval-nav", &json!({ "agent": agent.config, "splits": splits, "dataset": dataset.config }));
    eval_nav(&dataset, &agent, splits, out, &prov)
}

/// Fails unless the agent's greedy SR on `split` reaches `gate`.
pub fn check_gate(dataset: &Dataset, agent: &Agent, split: SplitName, gate: f64) -> Result<f64> {
    let sr = evaluate_navigation(agent, dataset, &dataset.episodes_in(split))?.sr;
    if sr < gate {
        return Err(PipelineError::Gate { arch: agent.architecture(), split, sr, gate });
    }
    Ok(sr)
}

/// One line of a faithfulness record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: SplitName,
    pub record: FaithfulnessRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithOutputs {
    pub aggregates: Vec<ReportEntry>,
    pub oracle_aggregates: Vec<ReportEntry>,
}

/// Runs the faithfulness benchmark on `splits` plus their pooled union,
/// writing per-step records and aggregates for the full trajectories and
/// for the oracle comparison.
pub fn eval_faith(
    dataset: &Dataset,
    agent: &Agent,
    splits: &[SplitName],
    methods: &[Method],
    config: &EvalConfig,
    out: &Path,
) -> Result<FaithOutputs> {
    let arch = agent.architecture().to_string();
    let prov = provenance(
        "eval-faith",
        &json!({ "agent": agent.config, "splits": splits, "methods": methods, "eval": config, "dataset": dataset.config }),
    );
    let mut all_records = Vec::new();
    let mut oracle_records = Vec::new();
    let mut aggregates = Vec::new();
    let mut oracle_aggregates = Vec::new();
    for &split in splits {
        let episodes = dataset.episodes_in(split);
        let b = benchmark(agent, dataset, &episodes, split.as_str(), methods, config)?;
        aggregates.extend(b.aggregates);
        oracle_aggregates.extend(b.oracle.aggregates);
        all_records.extend(b.records.into_iter().map(|r| (split, r)));
        oracle_records.extend(b.oracle.records.into_iter().map(|r| (split, r)));
    }
    if splits.len() > 1 {
        aggregates.extend(pool(&all_records, methods)?);
        oracle_aggregates.extend(pool(&oracle_records, &with_oracle(methods))?);
    }
    write_records(&out.join("faith_records.jsonl"), FAITH_FORMAT, &prov, split_rows(&all_records))?;
    write_records(&out.join("oracle_records.jsonl"), FAITH_FORMAT, &prov, split_rows(&oracle_records))?;
    let outputs = FaithOutputs { aggregates: entries(&arch, aggregates), oracle_aggregates: entries(&arch, oracle_aggregates) };
    write_records(&out.join("aggregates.jsonl"), AGG_FORMAT, &prov, &outputs.aggregates)?;
    write_records(&out.join("oracle_aggregates.jsonl"), AGG_FORMAT, &prov, &outputs.oracle_aggregates)?;
    Ok(outputs)
}

/// Oracle comparison alone: on-path steps only, `k` set to each step's
/// rationale size, oracle appended to `methods`.
pub fn compare_oracle(
    dataset: &Dataset,
    agent: &Agent,
    splits: &[SplitName],
    methods: &[Method],
    config: &EvalConfig,
    out: &Path,
) -> Result<Vec<ReportEntry>> {
    let prov = provenance(
        "compare-oracle",
        &json!({ "agent": agent.config, "splits": splits, "methods": methods, "eval": config, "dataset": dataset.config }),
    );
    let explainers: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Oracle).collect();
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    for &split in splits {
        let c = compare_with_oracle(agent, dataset, &dataset.episodes_in(split), split.as_str(), &explainers, config)?;
        aggregates.extend(c.aggregates);
        records.extend(c.records.into_iter().map(|r| (split, r)));
    }
    if splits.len() > 1 {
        aggregates.extend(pool(&records, &with_oracle(methods))?);
    }
    let rows = entries(&agent.architecture().to_string(), aggregates);
    write_records(&out.join("oracle_records.jsonl"), FAITH_FORMAT, &prov, split_rows(&records))?;
    write_records(&out.join("oracle_aggregates.jsonl"), AGG_FORMAT, &prov, &rows)?;
    Ok(rows)
}

fn with_oracle(methods: &[Method]) -> Vec<Method> {
    let mut ms: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Oracle).collect();
    ms.push(Method::Oracle);
    ms
}

/// Aggregates over the union of the per-split records.
fn pool(records: &[(SplitName, FaithfulnessRecord)], methods: &[Method]) -> Result<Vec<AggregateResult>> {
    methods
        .iter()
        .map(|&m| {
            let rows: Vec<FaithfulnessRecord> = records.iter().filter(|(_, r)| r.method == m).map(|(_, r)| r.clone()).collect();
            Ok(AggregateResult::from_records(m, POOLED_SPLIT, &rows)?)
        })
        .collect()
}

fn entries(arch: &str, aggregates: Vec<AggregateResult>) -> Vec<ReportEntry> {
    aggregates.into_iter().map(|aggregate| ReportEntry { architecture: arch.to_string(), aggregate }).collect()
}

fn split_rows(records: &[(SplitName, FaithfulnessRecord)]) -> Vec<SplitRecord> {
    records.iter().map(|(split, r)| SplitRecord { split: *split, record: r.clone() }).collect()
}

/// Writes `<stem>.tsv` and `<stem>.txt` tables for the given aggregate files.
pub fn report(inputs: &[PathBuf], out_dir: &Path, stem: &str) -> Result<Vec<ReportEntry>> {
    let mut entries = Vec::new();
    for path in inputs {
        let (_, rows): (_, Vec<ReportEntry>) = read_records(path, AGG_FORMAT)?;
        entries.extend(rows);
    }
    write_report(&entries, out_dir, stem)?;
    Ok(entries)
}

pub fn write_report(entries: &[ReportEntry], out_dir: &Path, stem: &str) -> Result<()> {
    if entries.is_empty() {
        return Err(PipelineError::NothingToReport);
    }
    write_text(&out_dir.join(format!("{stem}.tsv")), &to_tsv(entries))?;
    write_text(&out_dir.join(format!("{stem}.txt")), &to_text(entries))
}

/// Heatmaps for one episode: one SVG per method, one row per step of the
/// agent's greedy trajectory, rationale tokens underlined.
pub fn visualize(
    dataset: &Dataset,
    agent: &Agent,
    episode_id: &str,
    methods: &[Method],
    config: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ep = dataset.episodes.iter().find(|e| e.id == episode_id).ok_or_else(|| PipelineError::UnknownEpisode(episode_id.into()))?;
    let graph = dataset.graph_of(ep);
    let traj = rollout(agent, graph, &ep.instruction.ids, ep.start, Policy::Greedy)?;
    let actions = traj.actions();
    let tokens = ep.instruction.tokens(&dataset.vocab);
    let mut written = Vec::new();
    for &m in methods {
        let mut rows = Vec::with_capacity(traj.len());
        for t in 0..traj.len() {
            if m == Method::Oracle && ep.rationale.get(t).is_none() {
                continue;
            }
            let ctx = StepContext { agent, graph, episode: ep, trajectory: &traj, actions: &actions, step: t, random_seed: config.random_seed };
            let attr = attribute(m, &ctx, &config.attribution)?;
            rows.push(HeatmapRow {
                label: format!("step {} (a={})", t + 1, traj.steps[t].action),
                scores: attr.scores,
                underline: ep.rationale.get(t).cloned().unwrap_or_default(),
            });
        }
        let title = format!("{} / {} / {}", agent.architecture(), ep.id, m.label());
        let path = out_dir.join(format!("{}_{}.svg", ep.id, m.as_str()));
        write_text(&path, &render_svg(&title, &tokens, &rows)?)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

pub fn load_checkpoint_for(dataset: &Dataset, checkpoint: &Path) -> Result<Agent> {
    load_agent(dataset, checkpoint, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub architecture: Architecture,
    pub initial_loss: f64,
    pub navigation: Vec<SplitMetrics>,
    pub gate_passed: bool,
    /// Wall-clock training time; kept out of the written summary.
    #[serde(skip)]
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub agents: Vec<ArchitectureSummary>,
    pub aggregates: Vec<ReportEntry>,
    pub oracle_aggregates: Vec<ReportEntry>,
}

/// Full default pipeline: dataset, training, navigation gate, faithfulness
/// benchmark, oracle comparison, reports and example heatmaps.
///
/// Layout of `out`: `data/`, `<arch>/{checkpoint/,loss.jsonl,nav.jsonl,
/// faith_records.jsonl,aggregates.jsonl,oracle_records.jsonl,
/// oracle_aggregates.jsonl,heatmaps/}`, `report.{tsv,txt}`,
/// `oracle_report.{tsv,txt}`, `summary.json`.
pub fn run_all(config: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    let dataset = gen_data(&config.dataset, &out.join("data"))?;
    let mut summary = PipelineSummary { agents: Vec::new(), aggregates: Vec::new(), oracle_aggregates: Vec::new() };
    for &arch in &config.architectures {
        let dir = out.join(arch.as_str());
        let clock = Instant::now();
        let (agent, navigation) = train(&dataset, arch, config.agent_seed, config.train_config(arch), &dir)?;
        let train_seconds = clock.elapsed().as_secs_f64();
        let (_, loss): (_, Vec<Value>) = read_records(&dir.join("loss.jsonl"), LOSS_FORMAT)?;
        let gate_passed = navigation.iter().any(|m| m.split == config.gate_split && m.metrics.sr >= config.sr_gate);
        summary.agents.push(ArchitectureSummary {
            architecture: arch,
            initial_loss: loss[0]["loss"].as_f64().unwrap_or(f64::NAN),
            navigation,
            gate_passed,
            train_seconds,
        });
        if !gate_passed {
            continue;
        }
        let faith = eval_faith(&dataset, &agent, &config.eval_splits, &config.methods, &config.eval, &dir)?;
        summary.aggregates.extend(faith.aggregates);
        summary.oracle_aggregates.extend(faith.oracle_aggregates);
        if let Some(ep) = dataset.episodes_in(config.gate_split).first() {
            let mut methods = config.methods.clone();
            methods.push(Method::Oracle);
            visualize(&dataset, &agent, &ep.id, &methods, &config.eval, &dir.join("heatmaps"))?;
        }
    }
    if !summary.aggregates.is_empty() {
        write_report(&summary.aggregates, out, "report")?;
        write_report(&summary.oracle_aggregates, out, "oracle_report")?;
    }
    write_document(&out.join("summary.json"), "vlnfaith-summary", &provenance("run-all", config), &summary)?;
    Ok(summary)
}

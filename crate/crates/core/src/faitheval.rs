//! Erasure-based faithfulness measurement with forced replay.
//!
//! For a decision at step `t` of a greedy trajectory, the top-k tokens of an
//! attribution are erased (or only they are kept), the agent restarts from
//! the first location with the perturbed instruction, is forced through the
//! original actions `a_1..a_{t-1}`, and its distribution at step `t` is
//! compared with the original one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{argmax, replay_step, rollout, Agent, AgentError, Architecture, GradMode, Policy, Trajectory};
use crate::attribution::{attribute, Attribution, AttributionConfig, AttributionError, Method, Ranking, StepContext};
use crate::navworld::{vocab, Dataset, Episode, NavGraph};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("step {step} is outside a trajectory of {len} steps")]
    Step { step: usize, len: usize },
    #[error("no steps where the agent's location matches the expert path")]
    NoOverlap,
    #[error("nothing to evaluate")]
    Empty,
    #[error("unknown erasure operation '{0}'")]
    UnknownOp(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureOp {
    SliceOut,
    TokenReplace,
}

impl ErasureOp {
    pub const ALL: [ErasureOp; 2] = [ErasureOp::SliceOut, ErasureOp::TokenReplace];

    pub fn as_str(self) -> &'static str {
        match self {
            ErasureOp::SliceOut => "slice_out",
            ErasureOp::TokenReplace => "token_replace",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErasureOp::SliceOut => "Slice Out",
            ErasureOp::TokenReplace => "Token Replacement",
        }
    }
}

impl fmt::Display for ErasureOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErasureOp {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        ErasureOp::ALL.into_iter().find(|o| o.as_str() == s).ok_or_else(|| EvalError::UnknownOp(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// Apply the operation to the selected tokens.
    Erase,
    /// Apply the operation to every erasable token except the selected ones.
    Preserve,
}

/// Indices of the `min(k, #erasable)` highest-ranked erasable positions,
/// ties broken toward the lower index, returned in ascending order.
pub fn select_top_k(scores: &[f64], k: usize, erasable: &[bool], ranking: Ranking) -> Vec<usize> {
    let key = |i: usize| match ranking {
        Ranking::Signed => scores[i],
        Ranking::Absolute => scores[i].abs(),
    };
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| erasable[i]).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Applies `op` to the selected positions (erase) or to the other erasable
/// positions (preserve). Special tokens are never touched.
pub fn perturb_instruction(
    ids: &[usize],
    indices: &[usize],
    mode: PerturbMode,
    op: ErasureOp,
    arch: Architecture,
) -> Vec<usize> {
    let selected = |i: usize| indices.contains(&i);
    let hit = |i: usize| {
        !vocab::is_special(ids[i])
            && match mode {
                PerturbMode::Erase => selected(i),
                PerturbMode::Preserve => !selected(i),
            }
    };
    match op {
        ErasureOp::SliceOut => (0..ids.len()).filter(|&i| !hit(i)).map(|i| ids[i]).collect(),
        ErasureOp::TokenReplace => {
            (0..ids.len()).map(|i| if hit(i) { arch.replacement_token() } else { ids[i] }).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub episode: String,
    pub step: usize,
    pub method: Method,
    pub op: ErasureOp,
    pub k: usize,
    pub selected: Vec<usize>,
    pub comp: f64,
    pub suff: f64,
    pub df_wo_r: u8,
    pub df_w_r: u8,
    pub action: usize,
    pub p_original: f64,
    pub p_erased: f64,
    pub p_preserved: f64,
    pub action_erased: usize,
    pub action_preserved: usize,
}

/// Forced replay of `ids` through `prefix`; returns the distribution at the next step.
fn replay_probs(agent: &Agent, graph: &NavGraph, ids: &[usize], start: usize, prefix: &[usize]) -> Result<Vec<f64>> {
    Ok(replay_step(agent, graph, ids, start, prefix, GradMode::Frozen, None)?.probs())
}

/// Metrics for step `step` of `trajectory` under one erasure operation.
#[allow(clippy::too_many_arguments)]
pub fn measure_step(
    agent: &Agent,
    graph: &NavGraph,
    episode: &Episode,
    trajectory: &Trajectory,
    step: usize,
    attribution: &Attribution,
    op: ErasureOp,
    k: usize,
    ranking: Ranking,
) -> Result<FaithfulnessRecord> {
    let trace = trajectory.steps.get(step).ok_or(EvalError::Step { step, len: trajectory.len() })?;
    let actions = trajectory.actions();
    let prefix = &actions[..step];
    let ids = &episode.instruction.ids;
    let selected = select_top_k(&attribution.scores, k, &attribution.erasable, ranking);
    let arch = agent.architecture();
    let erased = perturb_instruction(ids, &selected, PerturbMode::Erase, op, arch);
    let preserved = perturb_instruction(ids, &selected, PerturbMode::Preserve, op, arch);
    let p_erased = replay_probs(agent, graph, &erased, episode.start, prefix)?;
    let p_preserved = replay_probs(agent, graph, &preserved, episode.start, prefix)?;
    let a = trace.action;
    let (a_erased, a_preserved) = (argmax(&p_erased), argmax(&p_preserved));
    let p = trace.probs[a];
    Ok(FaithfulnessRecord {
        episode: episode.id.clone(),
        step,
        method: attribution.method,
        op,
        k,
        selected,
        comp: p - p_erased[a],
        suff: p - p_preserved[a],
        df_wo_r: u8::from(a_erased != a),
        df_w_r: u8::from(a_preserved != a),
        action: a,
        p_original: p,
        p_erased: p_erased[a],
        p_preserved: p_preserved[a],
        action_erased: a_erased,
        action_preserved: a_preserved,
    })
}

/// How many tokens to erase or keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum KPolicy {
    Fixed(usize),
    /// The evaluated episodes' mean oracle-rationale size, rounded.
    MeanRationale,
}

impl KPolicy {
    pub fn resolve(self, episodes: &[&Episode]) -> usize {
        match self {
            KPolicy::Fixed(k) => k,
            KPolicy::MeanRationale => Dataset::mean_rationale_len(episodes.iter().copied()).round() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: KPolicy,
    pub attribution: AttributionConfig,
    /// Base seed of the random baseline.
    pub random_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: KPolicy::MeanRationale, attribution: AttributionConfig::default(), random_seed: 17 }
    }
}

/// Means of the four metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub df_wo_r: f64,
    pub comp: f64,
    pub df_w_r: f64,
    pub suff: f64,
}

impl MetricMeans {
    pub fn of(records: &[&FaithfulnessRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let sum = |f: &dyn Fn(&FaithfulnessRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            df_wo_r: sum(&|r| r.df_wo_r as f64),
            comp: sum(&|r| r.comp),
            df_w_r: sum(&|r| r.df_w_r as f64),
            suff: sum(&|r| r.suff),
        }
    }

    pub fn average(parts: &[MetricMeans]) -> Self {
        let n = parts.len().max(1) as f64;
        Self {
            df_wo_r: parts.iter().map(|m| m.df_wo_r).sum::<f64>() / n,
            comp: parts.iter().map(|m| m.comp).sum::<f64>() / n,
            df_w_r: parts.iter().map(|m| m.df_w_r).sum::<f64>() / n,
            suff: parts.iter().map(|m| m.suff).sum::<f64>() / n,
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::DfWoR => self.df_wo_r,
            Metric::Comp => self.comp,
            Metric::DfWR => self.df_w_r,
            Metric::Suff => self.suff,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    DfWoR,
    Comp,
    DfWR,
    Suff,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::DfWoR, Metric::Comp, Metric::DfWR, Metric::Suff];

    pub fn label(self) -> &'static str {
        match self {
            Metric::DfWoR => "DFw/oR",
            Metric::Comp => "COMP",
            Metric::DfWR => "DFw/R",
            Metric::Suff => "SUFF",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::DfWoR | Metric::Comp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub method: Method,
    pub split: String,
    pub per_op: BTreeMap<ErasureOp, MetricMeans>,
    /// Arithmetic mean of the per-op means.
    pub averaged: MetricMeans,
    /// Op-averaged mean of per-episode step means.
    pub episode_mean: MetricMeans,
    /// Measured steps per operation.
    pub steps: usize,
}

impl AggregateResult {
    /// Pools `records` (all of one method) with equal weight per step.
    pub fn from_records(method: Method, split: &str, records: &[FaithfulnessRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut per_op = BTreeMap::new();
        let mut per_op_episode = Vec::new();
        let mut steps = 0;
        for op in ErasureOp::ALL {
            let rows: Vec<&FaithfulnessRecord> = records.iter().filter(|r| r.op == op).collect();
            steps = steps.max(rows.len());
            per_op.insert(op, MetricMeans::of(&rows));
            let mut by_episode: BTreeMap<&str, Vec<&FaithfulnessRecord>> = BTreeMap::new();
            for r in &rows {
                by_episode.entry(r.episode.as_str()).or_default().push(r);
            }
            let means: Vec<MetricMeans> = by_episode.values().map(|v| MetricMeans::of(v)).collect();
            per_op_episode.push(MetricMeans::average(&means));
        }
        let averaged = MetricMeans::average(&per_op.values().copied().collect::<Vec<_>>());
        Ok(Self {
            method,
            split: split.to_string(),
            per_op,
            averaged,
            episode_mean: MetricMeans::average(&per_op_episode),
            steps,
        })
    }
}

/// Records of one evaluation pass.
#[derive(Default)]
struct Measured {
    /// Every step, budget from the configured policy.
    all_steps: Vec<FaithfulnessRecord>,
    /// Steps where the agent stands where the expert stood, budget equal to
    /// the step's rationale size.
    overlap: Vec<FaithfulnessRecord>,
}

/// Measures every method on the requested step populations, computing each
/// attribution once. Records come back ordered by episode, step, method, op.
fn run(
    agent: &Agent,
    dataset: &Dataset,
    episodes: &[&Episode],
    methods: &[Method],
    config: &EvalConfig,
    all_steps: bool,
    overlap: bool,
) -> Result<Measured> {
    let default_k = config.k.resolve(episodes);
    let per_episode: Vec<Measured> = episodes
        .par_iter()
        .map(|ep| {
            let graph = dataset.graph_of(ep);
            let traj = rollout(agent, graph, &ep.instruction.ids, ep.start, Policy::Greedy)?;
            let actions = traj.actions();
            let mut out = Measured::default();
            for t in 0..traj.len() {
                let on_path = overlap && ep.path.get(t) == Some(&traj.steps[t].node);
                for &m in methods {
                    let has_rationale = ep.rationale.get(t).is_some();
                    let full = all_steps && (m != Method::Oracle || has_rationale);
                    if !full && !on_path {
                        continue;
                    }
                    let ctx = StepContext {
                        agent,
                        graph,
                        episode: ep,
                        trajectory: &traj,
                        actions: &actions,
                        step: t,
                        random_seed: config.random_seed,
                    };
                    let attr = attribute(m, &ctx, &config.attribution)?;
                    let ranking = config.attribution.ranking;
                    for op in ErasureOp::ALL {
                        if full {
                            out.all_steps.push(measure_step(agent, graph, ep, &traj, t, &attr, op, default_k, ranking)?);
                        }
                        if on_path {
                            let k = ep.rationale[t].len();
                            out.overlap.push(measure_step(agent, graph, ep, &traj, t, &attr, op, k, ranking)?);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut merged = Measured::default();
    for m in per_episode {
        merged.all_steps.extend(m.all_steps);
        merged.overlap.extend(m.overlap);
    }
    Ok(merged)
}

/// Per-step records and aggregates for several methods over all steps of
/// every episode's greedy trajectory.
pub fn evaluate_methods(
    agent: &Agent,
    dataset: &Dataset,
    episodes: &[&Episode],
    split: &str,
    methods: &[Method],
    config: &EvalConfig,
) -> Result<(Vec<FaithfulnessRecord>, Vec<AggregateResult>)> {
    if episodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let records = run(agent, dataset, episodes, methods, config, true, false)?.all_steps;
    let aggregates = aggregate(methods, split, &records)?;
    Ok((records, aggregates))
}

pub fn evaluate_method(
    agent: &Agent,
    dataset: &Dataset,
    episodes: &[&Episode],
    split: &str,
    method: Method,
    config: &EvalConfig,
) -> Result<(Vec<FaithfulnessRecord>, AggregateResult)> {
    let (records, mut aggs) = evaluate_methods(agent, dataset, episodes, split, &[method], config)?;
    Ok((records, aggs.remove(0)))
}

fn aggregate(methods: &[Method], split: &str, records: &[FaithfulnessRecord]) -> Result<Vec<AggregateResult>> {
    methods
        .iter()
        .map(|&m| {
            let rows: Vec<FaithfulnessRecord> = records.iter().filter(|r| r.method == m).cloned().collect();
            AggregateResult::from_records(m, split, &rows)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub records: Vec<FaithfulnessRecord>,
    /// One aggregate per method, oracle last.
    pub aggregates: Vec<AggregateResult>,
}

impl OracleComparison {
    pub fn get(&self, method: Method) -> Option<&AggregateResult> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

/// Measures `methods` and the oracle on the steps where the agent stands
/// where the expert stood, with `k` equal to that step's rationale size.
pub fn compare_with_oracle(
    agent: &Agent,
    dataset: &Dataset,
    episodes: &[&Episode],
    split: &str,
    methods: &[Method],
    config: &EvalConfig,
) -> Result<OracleComparison> {
    if episodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let all = with_oracle(methods);
    let records = run(agent, dataset, episodes, &all, config, false, true)?.overlap;
    comparison(&all, split, records)
}

fn with_oracle(methods: &[Method]) -> Vec<Method> {
    let mut all: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Oracle).collect();
    all.push(Method::Oracle);
    all
}

fn comparison(methods: &[Method], split: &str, records: Vec<FaithfulnessRecord>) -> Result<OracleComparison> {
    if records.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let aggregates = aggregate(methods, split, &records)?;
    Ok(OracleComparison { records, aggregates })
}

/// Results of [`evaluate_methods`] and [`compare_with_oracle`] from one pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub records: Vec<FaithfulnessRecord>,
    pub aggregates: Vec<AggregateResult>,
    pub oracle: OracleComparison,
}

/// Full-trajectory evaluation of `methods` plus the oracle comparison,
/// sharing attributions between the two populations.
pub fn benchmark(
    agent: &Agent,
    dataset: &Dataset,
    episodes: &[&Episode],
    split: &str,
    methods: &[Method],
    config: &EvalConfig,
) -> Result<Benchmark> {
    if episodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let all = with_oracle(methods);
    let measured = run(agent, dataset, episodes, &all, config, true, true)?;
    let tabled: Vec<Method> = methods.to_vec();
    let records: Vec<FaithfulnessRecord> =
        measured.all_steps.into_iter().filter(|r| tabled.contains(&r.method)).collect();
    let aggregates = aggregate(&tabled, split, &records)?;
    Ok(Benchmark { records, aggregates, oracle: comparison(&all, split, measured.overlap)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navworld::vocab::{BOS, EOS, MASK, UNK};

    #[test]
    fn top_k_selection() {
        let all = [true; 4];
        assert_eq!(select_top_k(&[0.1, 0.9, 0.9, -0.2], 2, &all, Ranking::Signed), vec![1, 2]);
        assert_eq!(select_top_k(&[0.5, 0.5], 1, &[true, true], Ranking::Signed), vec![0]);
        assert!(select_top_k(&[0.5, 0.5], 0, &[true, true], Ranking::Signed).is_empty());
        assert_eq!(select_top_k(&[0.1, 0.9, 0.9, -0.95], 1, &all, Ranking::Absolute), vec![3]);
        assert_eq!(select_top_k(&[0.1, 0.9, 0.3], 5, &[true, false, true], Ranking::Signed), vec![0, 2]);
    }

    #[test]
    fn perturbations() {
        let (red, lamp) = (20, 21);
        let ids = [BOS, 5, 6, red, lamp, EOS];
        let tf = Architecture::Transformer;
        assert_eq!(perturb_instruction(&ids, &[3], PerturbMode::Erase, ErasureOp::SliceOut, tf), vec![BOS, 5, 6, lamp, EOS]);
        assert_eq!(
            perturb_instruction(&ids, &[3], PerturbMode::Erase, ErasureOp::TokenReplace, tf),
            vec![BOS, 5, 6, MASK, lamp, EOS]
        );
        assert_eq!(
            perturb_instruction(&ids, &[3], PerturbMode::Erase, ErasureOp::TokenReplace, Architecture::Rnn),
            vec![BOS, 5, 6, UNK, lamp, EOS]
        );
        assert_eq!(perturb_instruction(&ids, &[3], PerturbMode::Preserve, ErasureOp::SliceOut, tf), vec![BOS, red, EOS]);
        assert_eq!(perturb_instruction(&ids, &[], PerturbMode::Erase, ErasureOp::SliceOut, tf), ids.to_vec());
    }

    fn record(ep: &str, op: ErasureOp, comp: f64, dfo: u8) -> FaithfulnessRecord {
        FaithfulnessRecord {
            episode: ep.into(),
            step: 0,
            method: Method::Random,
            op,
            k: 1,
            selected: vec![],
            comp,
            suff: -comp,
            df_wo_r: dfo,
            df_w_r: 0,
            action: 0,
            p_original: 0.5,
            p_erased: 0.5 - comp,
            p_preserved: 0.5 + comp,
            action_erased: 0,
            action_preserved: 0,
        }
    }

    #[test]
    fn aggregation_means() {
        let recs = vec![
            record("a", ErasureOp::SliceOut, 0.4, 1),
            record("a", ErasureOp::SliceOut, 0.2, 0),
            record("b", ErasureOp::SliceOut, 0.0, 0),
            record("a", ErasureOp::TokenReplace, 0.1, 0),
            record("a", ErasureOp::TokenReplace, 0.1, 0),
            record("b", ErasureOp::TokenReplace, 0.1, 1),
        ];
        let agg = AggregateResult::from_records(Method::Random, "val", &recs).unwrap();
        assert_eq!(agg.steps, 3);
        assert!((agg.per_op[&ErasureOp::SliceOut].comp - 0.2).abs() < 1e-15);
        assert!((agg.per_op[&ErasureOp::SliceOut].df_wo_r - 1.0 / 3.0).abs() < 1e-15);
        assert!((agg.averaged.comp - 0.15).abs() < 1e-15);
        assert!((agg.averaged.df_wo_r - 1.0 / 3.0).abs() < 1e-15);
        assert!((agg.episode_mean.comp - (0.15 + 0.1) / 2.0).abs() < 1e-15);
        let mut shuffled = recs.clone();
        shuffled.reverse();
        let again = AggregateResult::from_records(Method::Random, "val", &shuffled).unwrap();
        assert!((again.averaged.comp - agg.averaged.comp).abs() < 1e-15);
        assert!(AggregateResult::from_records(Method::Random, "val", &[]).is_err());
    }
}

//! Per-token importance scores for a single decision.
//!
//! Attention-based methods read the recorded [`StepTrace`]; gradient-based
//! methods differentiate the chosen action's probability through a
//! [`DecisionModel`], which for an agent replays the original action prefix
//! so every gradient is taken in the context of the decision it explains.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{embed, replay_step, Agent, AgentError, GradMode, HeadReduction, StepTrace, Trajectory};
use crate::navworld::{vocab, Episode, NavGraph};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}: non-finite attribution score")]
    NonFinite(Method),
    #[error("no oracle rationale for step {step}; the expert path has {steps} decisions")]
    Oracle { step: usize, steps: usize },
    #[error("step {step} is outside a trajectory of {len} steps")]
    Step { step: usize, len: usize },
    #[error("unknown attribution method '{0}'")]
    UnknownMethod(String),
    #[error("integrated-gradient step count must be at least 1")]
    Steps,
}

pub type Result<T> = std::result::Result<T, AttributionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VaAtt,
    VecNorm,
    VaGrad,
    GradInp,
    GradCam,
    IngGrad,
    Random,
    Oracle,
}

impl Method {
    /// The six explanation methods under evaluation.
    pub const EXPLAINERS: [Method; 6] =
        [Method::VaAtt, Method::VecNorm, Method::VaGrad, Method::GradInp, Method::GradCam, Method::IngGrad];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::VaAtt => "va_att",
            Method::VecNorm => "vec_norm",
            Method::VaGrad => "va_grad",
            Method::GradInp => "grad_inp",
            Method::GradCam => "grad_cam",
            Method::IngGrad => "ing_grad",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }

    /// Table label.
    pub fn label(self) -> &'static str {
        match self {
            Method::VaAtt => "VaAtt",
            Method::VecNorm => "VecNorm",
            Method::VaGrad => "VaGrad",
            Method::GradInp => "GradInp",
            Method::GradCam => "GradCAM",
            Method::IngGrad => "IngGrad",
            Method::Random => "Random",
            Method::Oracle => "Oracle",
        }
    }

    pub fn is_gradient_based(self) -> bool {
        matches!(self, Method::VaGrad | Method::GradInp | Method::GradCam | Method::IngGrad)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = AttributionError;
    fn from_str(s: &str) -> Result<Self> {
        let all = Method::EXPLAINERS.into_iter().chain([Method::Random, Method::Oracle]);
        all.into_iter()
            .find(|m| m.as_str() == s || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| AttributionError::UnknownMethod(s.to_string()))
    }
}

/// Reduction of a per-token feature vector to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    #[default]
    Sum,
    L2,
}

impl Scalarization {
    fn apply(self, v: impl Iterator<Item = f64>) -> f64 {
        match self {
            Scalarization::Sum => v.sum(),
            Scalarization::L2 => v.map(|a| a * a).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    #[default]
    Signed,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub ig_steps: usize,
    pub ranking: Ranking,
    pub scalarization: Scalarization,
    pub head_reduction: HeadReduction,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { ig_steps: 100, ranking: Ranking::Signed, scalarization: Scalarization::Sum, head_reduction: HeadReduction::Mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub method: Method,
    pub step: usize,
    pub scores: Vec<f64>,
    /// Positions an erasure may touch; special tokens are `false` and score 0.
    pub erasable: Vec<bool>,
    pub meta: BTreeMap<String, f64>,
}

impl Attribution {
    fn new(method: Method, step: usize, mut scores: Vec<f64>, ids: &[usize]) -> Result<Self> {
        let erasable: Vec<bool> = ids.iter().map(|&id| !vocab::is_special(id)).collect();
        for (s, &ok) in scores.iter_mut().zip(&erasable) {
            if !ok {
                *s = 0.0;
            }
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(AttributionError::NonFinite(method));
        }
        Ok(Self { method, step, scores, erasable, meta: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Gradients of the explained probability with respect to the token
/// embeddings `e` and the linguistic features `x`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub prob: f64,
    pub e: Tensor,
    pub grad_e: Tensor,
    pub x: Tensor,
    pub grad_x: Tensor,
}

/// A differentiable decision whose token embeddings can be substituted.
pub trait DecisionModel {
    fn token_ids(&self) -> &[usize];
    /// Embeddings of the actual instruction.
    fn embeddings(&self) -> Result<Tensor>;
    /// Embeddings of the empty instruction: `<pad>` at every erasable
    /// position, special tokens kept in place.
    fn baseline_embeddings(&self) -> Result<Tensor>;
    /// Forward and backward pass, optionally at substituted embeddings.
    fn gradients(&self, embeddings: Option<&Tensor>) -> Result<Gradients>;
}

/// The decision at step `step` of an agent's trajectory, reproduced by
/// forcing the trajectory's earlier actions from a fresh start.
pub struct AgentDecision<'a> {
    pub agent: &'a Agent,
    pub graph: &'a NavGraph,
    pub ids: &'a [usize],
    pub start: usize,
    pub prefix: &'a [usize],
    pub action: usize,
}

impl<'a> AgentDecision<'a> {
    pub fn from_trajectory(
        agent: &'a Agent,
        graph: &'a NavGraph,
        episode: &'a Episode,
        trajectory: &'a Trajectory,
        actions: &'a [usize],
        step: usize,
    ) -> Result<Self> {
        let trace = trajectory.steps.get(step).ok_or(AttributionError::Step { step, len: trajectory.len() })?;
        Ok(Self {
            agent,
            graph,
            ids: &episode.instruction.ids,
            start: episode.start,
            prefix: &actions[..step],
            action: trace.action,
        })
    }

    /// Probability of the explained action at the given embeddings.
    pub fn probability(&self, embeddings: Option<&Tensor>) -> Result<f64> {
        let r = replay_step(self.agent, self.graph, self.ids, self.start, self.prefix, GradMode::Frozen, embeddings)?;
        Ok(r.probs()[self.action])
    }
}

impl DecisionModel for AgentDecision<'_> {
    fn token_ids(&self) -> &[usize] {
        self.ids
    }

    fn embeddings(&self) -> Result<Tensor> {
        Ok(embed(self.agent, self.ids)?)
    }

    fn baseline_embeddings(&self) -> Result<Tensor> {
        Ok(embed(self.agent, &empty_instruction(self.ids))?)
    }

    fn gradients(&self, embeddings: Option<&Tensor>) -> Result<Gradients> {
        let mut r = replay_step(self.agent, self.graph, self.ids, self.start, self.prefix, GradMode::Inputs, embeddings)?;
        let (e, x) = (r.session.embeddings(), r.session.features());
        let tape = r.session.tape_mut();
        let target = tape.index(r.output.probs, self.action)?;
        tape.backward(target)?;
        let grad = |id| tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
        Ok(Gradients {
            prob: tape.value(target).item(),
            grad_e: grad(e),
            grad_x: grad(x),
            e: tape.value(e).clone(),
            x: tape.value(x).clone(),
        })
    }
}

/// Output of a [`LinearProbe`] as a function of its score `z = sum_i w_i . e_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLink {
    /// `p = z`: gradients are constant along any path.
    Identity,
    /// `p = sigmoid(z)`.
    Sigmoid,
}

/// `<pad>` at every erasable position; special tokens are kept.
pub fn empty_instruction(ids: &[usize]) -> Vec<usize> {
    ids.iter().map(|&id| if vocab::is_special(id) { id } else { vocab::PAD }).collect()
}

/// Hand-built model `p = link(sum_i w_i . e_i)` whose linguistic features
/// are the embeddings themselves. Gradient attributions have closed forms here.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub ids: Vec<usize>,
    pub weights: Tensor,
    pub embeddings: Tensor,
    pub baseline: Tensor,
    pub link: ProbeLink,
}

impl LinearProbe {
    pub fn logit(&self, embeddings: &Tensor) -> f64 {
        self.weights.data().iter().zip(embeddings.data()).map(|(w, e)| w * e).sum()
    }

    pub fn probability(&self, embeddings: &Tensor) -> f64 {
        let z = self.logit(embeddings);
        match self.link {
            ProbeLink::Identity => z,
            ProbeLink::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative of the output with respect to the score.
    pub fn slope(&self, embeddings: &Tensor) -> f64 {
        match self.link {
            ProbeLink::Identity => 1.0,
            ProbeLink::Sigmoid => {
                let p = self.probability(embeddings);
                p * (1.0 - p)
            }
        }
    }
}

impl DecisionModel for LinearProbe {
    fn token_ids(&self) -> &[usize] {
        &self.ids
    }

    fn embeddings(&self) -> Result<Tensor> {
        Ok(self.embeddings.clone())
    }

    fn baseline_embeddings(&self) -> Result<Tensor> {
        Ok(self.baseline.clone())
    }

    fn gradients(&self, embeddings: Option<&Tensor>) -> Result<Gradients> {
        let e = embeddings.unwrap_or(&self.embeddings).clone();
        let p = self.probability(&e);
        let slope = self.slope(&e);
        let grad = self.weights.map(|w| w * slope);
        Ok(Gradients { prob: p, e: e.clone(), grad_e: grad.clone(), x: e, grad_x: grad })
    }
}

fn rows(t: &Tensor) -> impl Iterator<Item = &[f64]> {
    (0..t.rows()).map(move |i| t.row(i))
}

pub fn va_att(trace: &StepTrace, ids: &[usize], config: &AttributionConfig) -> Result<Attribution> {
    Attribution::new(Method::VaAtt, trace.step, config.head_reduction.reduce(&trace.alpha_heads), ids)
}

/// Norm of each token's attention-weighted value vector, summed over heads
/// before the norm is taken.
pub fn vec_norm(trace: &StepTrace, ids: &[usize]) -> Result<Attribution> {
    let scores = (0..ids.len())
        .map(|i| {
            let dim = trace.value_vectors[0].cols();
            let mut acc = vec![0.0; dim];
            for (alpha, values) in trace.alpha_heads.iter().zip(&trace.value_vectors) {
                for (a, v) in acc.iter_mut().zip(values.row(i)) {
                    *a += alpha[i] * v;
                }
            }
            acc.iter().map(|a| a * a).sum::<f64>().sqrt()
        })
        .collect();
    Attribution::new(Method::VecNorm, trace.step, scores, ids)
}

pub fn va_grad(model: &impl DecisionModel, step: usize) -> Result<Attribution> {
    let g = model.gradients(None)?;
    let scores = rows(&g.grad_e).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Attribution::new(Method::VaGrad, step, scores, model.token_ids())
}

pub fn grad_inp(model: &impl DecisionModel, step: usize, config: &AttributionConfig) -> Result<Attribution> {
    let g = model.gradients(None)?;
    let scores = rows(&g.grad_e)
        .zip(rows(&g.e))
        .map(|(gr, er)| config.scalarization.apply(gr.iter().zip(er).map(|(a, b)| a * b)))
        .collect();
    Attribution::new(Method::GradInp, step, scores, model.token_ids())
}

/// Token-averaged feature gradient as a shared weight vector, dotted with
/// each token's features. Signed, without rectification.
pub fn grad_cam(model: &impl DecisionModel, step: usize, config: &AttributionConfig) -> Result<Attribution> {
    let g = model.gradients(None)?;
    let len = g.grad_x.rows() as f64;
    let mut weight = vec![0.0; g.grad_x.cols()];
    for r in rows(&g.grad_x) {
        for (w, v) in weight.iter_mut().zip(r) {
            *w += v / len;
        }
    }
    let scores = rows(&g.x)
        .map(|xr| config.scalarization.apply(weight.iter().zip(xr).map(|(w, x)| w * x)))
        .collect();
    Attribution::new(Method::GradCam, step, scores, model.token_ids())
}

/// Right Riemann sum of the path integral from the empty-instruction embeddings.
pub fn int_grad(model: &impl DecisionModel, step: usize, config: &AttributionConfig) -> Result<Attribution> {
    let n = config.ig_steps;
    if n == 0 {
        return Err(AttributionError::Steps);
    }
    let e = model.embeddings()?;
    let base = model.baseline_embeddings()?;
    let delta = e.zip_map(&base, |a, b| a - b);
    let mut avg = Tensor::zeros(e.shape());
    for s in 1..=n {
        let frac = s as f64 / n as f64;
        let point = base.zip_map(&delta, |b, d| b + frac * d);
        let g = model.gradients(Some(&point))?;
        for (a, v) in avg.data_mut().iter_mut().zip(g.grad_e.data()) {
            *a += v / n as f64;
        }
    }
    let scores = rows(&avg)
        .zip(rows(&delta))
        .map(|(gr, dr)| config.scalarization.apply(gr.iter().zip(dr).map(|(a, b)| a * b)))
        .collect();
    let mut attr = Attribution::new(Method::IngGrad, step, scores, model.token_ids())?;
    attr.meta.insert("steps".into(), n as f64);
    Ok(attr)
}

/// Uniform scores in `[0, 1)` on erasable positions.
pub fn random_attr(seed: u64, ids: &[usize], step: usize) -> Result<Attribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = ids.iter().map(|&id| if vocab::is_special(id) { 0.0 } else { rng.gen::<f64>() }).collect();
    Attribution::new(Method::Random, step, scores, ids)
}

/// 1 on the expert rationale of step `step`, 0 elsewhere.
pub fn oracle_attr(episode: &Episode, step: usize) -> Result<Attribution> {
    let rationale =
        episode.rationale.get(step).ok_or(AttributionError::Oracle { step, steps: episode.rationale.len() })?;
    let mut scores = vec![0.0; episode.instruction.len()];
    for &i in rationale {
        scores[i] = 1.0;
    }
    Attribution::new(Method::Oracle, step, scores, &episode.instruction.ids)
}

/// Seed for the random baseline at one step of one episode.
pub fn step_seed(base: u64, episode: &str, step: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in episode.bytes().chain(step.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Everything needed to explain step `step` of a greedy trajectory.
pub struct StepContext<'a> {
    pub agent: &'a Agent,
    pub graph: &'a NavGraph,
    pub episode: &'a Episode,
    pub trajectory: &'a Trajectory,
    pub actions: &'a [usize],
    pub step: usize,
    pub random_seed: u64,
}

pub fn attribute(method: Method, ctx: &StepContext, config: &AttributionConfig) -> Result<Attribution> {
    let ids = &ctx.episode.instruction.ids;
    let trace = ctx.trajectory.steps.get(ctx.step).ok_or(AttributionError::Step { step: ctx.step, len: ctx.trajectory.len() })?;
    let decision = || AgentDecision::from_trajectory(ctx.agent, ctx.graph, ctx.episode, ctx.trajectory, ctx.actions, ctx.step);
    match method {
        Method::VaAtt => va_att(trace, ids, config),
        Method::VecNorm => vec_norm(trace, ids),
        Method::VaGrad => va_grad(&decision()?, ctx.step),
        Method::GradInp => grad_inp(&decision()?, ctx.step, config),
        Method::GradCam => grad_cam(&decision()?, ctx.step, config),
        Method::IngGrad => int_grad(&decision()?, ctx.step, config),
        Method::Random => random_attr(step_seed(ctx.random_seed, &ctx.episode.id, ctx.step), ids, ctx.step),
        Method::Oracle => oracle_attr(ctx.episode, ctx.step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(seed: u64, len: usize, dim: usize) -> LinearProbe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut ids = vec![vocab::BOS];
        ids.extend((0..len - 2).map(|i| 10 + i));
        ids.push(vocab::EOS);
        LinearProbe {
            ids,
            weights: Tensor::matrix(len, dim, draw(len * dim)).unwrap(),
            embeddings: Tensor::matrix(len, dim, draw(len * dim)).unwrap(),
            baseline: Tensor::zeros(&[len, dim]),
            link: ProbeLink::Sigmoid,
        }
    }

    fn trace(alpha_heads: Vec<Vec<f64>>, values: Vec<Tensor>) -> StepTrace {
        let len = alpha_heads[0].len();
        StepTrace {
            step: 0,
            node: 0,
            probs: vec![1.0],
            action: 0,
            alpha: HeadReduction::Mean.reduce(&alpha_heads),
            alpha_heads,
            value_vectors: values,
            x: Tensor::zeros(&[len, 2]),
            e: Tensor::zeros(&[len, 2]),
        }
    }

    #[test]
    fn probe_closed_forms() {
        let p = probe(1, 7, 5);
        let sp = p.slope(&p.embeddings);
        let vg = va_grad(&p, 0).unwrap();
        let gi = grad_inp(&p, 0, &AttributionConfig::default()).unwrap();
        let linear = LinearProbe { link: ProbeLink::Identity, ..p.clone() };
        let gi_linear = grad_inp(&linear, 0, &AttributionConfig::default()).unwrap();
        for n in [1, 7, 100] {
            let cfg = AttributionConfig { ig_steps: n, ..Default::default() };
            let ig = int_grad(&linear, 0, &cfg).unwrap();
            for (a, b) in ig.scores.iter().zip(&gi_linear.scores) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let mut q = p.clone();
        for i in [0, 6] {
            q.baseline.data_mut()[i * 5..(i + 1) * 5].copy_from_slice(q.embeddings.row(i));
        }
        let gap = |n: usize| {
            let cfg = AttributionConfig { ig_steps: n, ..Default::default() };
            let total: f64 = int_grad(&q, 0, &cfg).unwrap().scores.iter().sum();
            (total - (q.probability(&q.embeddings) - q.probability(&q.baseline))).abs()
        };
        assert!(gap(400) < 1e-3);
        assert!(gap(400) <= gap(50));
        for i in 1..6 {
            let w = p.weights.row(i);
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((vg.scores[i] - sp * norm).abs() < 1e-9);
            let dot: f64 = w.iter().zip(p.embeddings.row(i)).map(|(a, b)| a * b).sum();
            assert!((gi.scores[i] - sp * dot).abs() < 1e-12);
        }
        assert_eq!((vg.scores[0], vg.scores[6]), (0.0, 0.0));
        assert!(vg.scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn probe_annihilation_and_sign() {
        let mut p = probe(2, 5, 3);
        p.weights.data_mut()[6..9].fill(0.0);
        let vg = va_grad(&p, 0).unwrap();
        assert_eq!(vg.scores[2], 0.0);
        let cfg = AttributionConfig::default();
        let mut q = probe(3, 5, 3);
        q.embeddings.data_mut()[3..6].fill(0.0);
        assert_eq!(grad_inp(&q, 0, &cfg).unwrap().scores[1], 0.0);
        let same = AttributionConfig { ig_steps: 4, ..cfg.clone() };
        let mut r = q.clone();
        r.baseline = r.embeddings.clone();
        assert!(int_grad(&r, 0, &same).unwrap().scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn grad_cam_shares_one_weight_vector() {
        let mut p = probe(4, 5, 3);
        let row: Vec<f64> = p.embeddings.row(1).to_vec();
        p.embeddings.data_mut()[6..9].copy_from_slice(&row);
        p.embeddings.data_mut()[9..12].fill(0.0);
        let s = grad_cam(&p, 0, &AttributionConfig::default()).unwrap().scores;
        assert_eq!(s[1], s[2]);
        assert_eq!(s[3], 0.0);
    }

    #[test]
    fn attention_scores() {
        let ids = [vocab::BOS, 10, 11, 12, 13, vocab::EOS];
        let uniform = vec![0.0, 0.25, 0.25, 0.25, 0.25, 0.0];
        let values = Tensor::filled(&[6, 4], 0.5);
        let t = trace(vec![uniform.clone()], vec![values.clone()]);
        let a = va_att(&t, &ids, &AttributionConfig::default()).unwrap();
        assert_eq!(a.scores, uniform);
        let v = vec_norm(&t, &ids).unwrap();
        for i in 1..5 {
            assert!((v.scores[i] - 0.25 * 1.0).abs() < 1e-15);
        }
        let doubled = trace(vec![uniform], vec![values.map(|x| 2.0 * x)]);
        let v2 = vec_norm(&doubled, &ids).unwrap();
        for i in 0..6 {
            assert!((v2.scores[i] - 2.0 * v.scores[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn baselines() {
        let ids = [vocab::BOS, 10, 11, vocab::EOS, vocab::PAD];
        let a = random_attr(9, &ids, 0).unwrap();
        assert_eq!(a, random_attr(9, &ids, 0).unwrap());
        assert_ne!(a.scores, random_attr(10, &ids, 0).unwrap().scores);
        assert!(a.scores.iter().all(|&s| (0.0..1.0).contains(&s)));
        assert_eq!(a.erasable, vec![false, true, true, false, false]);
        assert_ne!(step_seed(1, "g000-s1", 0), step_seed(1, "g000-s1", 1));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::EXPLAINERS.into_iter().chain([Method::Random, Method::Oracle]) {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("lrp".parse::<Method>().is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::{rnn, transformer, Agent, AgentError, Architecture, Result};
use crate::navworld::{NavGraph, Observation};
use crate::tensor::{eval, NodeId, Op, ParamSet, Tape, Tensor};

/// Parameter nodes bound to one tape, looked up by name.
pub(crate) struct Weights<'a> {
    params: &'a ParamSet,
    ids: Vec<NodeId>,
}

impl<'a> Weights<'a> {
    pub(crate) fn get(&self, name: &str) -> NodeId {
        self.ids[self.params.position(name).expect("parameter layout checked at construction")]
    }

    pub(crate) fn value(&self, name: &str) -> &'a Tensor {
        self.params.get(name).expect("parameter layout checked at construction")
    }

    pub(crate) fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Cross-attention operands per head: keys `[L, d]`, values `[L, d]`, and
/// the plain per-token contribution vectors used by norm-based attribution.
pub(crate) struct Layers {
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub value_vectors: Vec<Tensor>,
}

pub(crate) struct Encoded {
    pub e: NodeId,
    pub x: NodeId,
    pub cross_mask: Vec<bool>,
    pub layers: Layers,
}

/// What the tape tracks gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Inference only.
    Frozen,
    /// Trainable parameters are differentiable leaves.
    Params,
    /// Token embeddings are a leaf and linguistic features retain their gradient.
    Inputs,
}

/// Tape handles of one decision.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub probs: NodeId,
    pub logits: NodeId,
    pub alpha_heads: Vec<NodeId>,
}

/// Plain-data record of one decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub node: usize,
    pub probs: Vec<f64>,
    pub action: usize,
    /// Head-reduced cross-attention weights over instruction positions.
    pub alpha: Vec<f64>,
    pub alpha_heads: Vec<Vec<f64>>,
    /// Per head, each token's value vector mapped into the context space (`[L, H]`).
    pub value_vectors: Vec<Tensor>,
    /// Linguistic features `[L, H]`.
    pub x: Tensor,
    /// Token embeddings `[L, E]`.
    pub e: Tensor,
}

impl StepTrace {
    pub fn chosen_prob(&self) -> f64 {
        self.probs[self.action]
    }
}

/// One forward pass over an instruction followed by any number of decisions.
pub struct Session<'a> {
    agent: &'a Agent,
    tape: Tape,
    weights: Weights<'a>,
    enc: Encoded,
    state: NodeId,
    prev: NodeId,
    cand_proj: Option<NodeId>,
    step: usize,
}

impl<'a> Session<'a> {
    /// Encodes `ids`. `embeddings`, when given, replaces the looked-up token
    /// embeddings while the attention masks still follow `ids`.
    pub fn new(agent: &'a Agent, ids: &[usize], mode: GradMode, embeddings: Option<&Tensor>) -> Result<Self> {
        let c = &agent.config;
        if ids.len() > c.max_instruction_len {
            return Err(AgentError::InstructionTooLong { len: ids.len(), max: c.max_instruction_len });
        }
        if ids.is_empty() {
            return Err(AgentError::InstructionTooLong { len: 0, max: c.max_instruction_len });
        }
        let mut tape = Tape::new();
        let weights = Weights { params: &agent.params, ids: agent.params.bind(&mut tape, mode == GradMode::Params) };
        let e = match (mode, embeddings) {
            (GradMode::Params, None) => tape.embedding(weights.get("tok_emb"), ids)?,
            (_, given) => {
                let value = match given {
                    Some(t) => {
                        if t.shape() != [ids.len(), c.embed_dim] {
                            return Err(crate::tensor::TensorError::Shape {
                                op: "embedding_lookup",
                                shapes: vec![t.shape().to_vec(), vec![ids.len(), c.embed_dim]],
                            }
                            .into());
                        }
                        t.clone()
                    }
                    None => embed(agent, ids)?,
                };
                if mode == GradMode::Frozen {
                    tape.constant(value)
                } else {
                    tape.leaf(value)
                }
            }
        };
        let x = match c.architecture {
            Architecture::Transformer => transformer::encode(c, &weights, &mut tape, e, ids)?,
            Architecture::Rnn => rnn::encode(c, &weights, &mut tape, e, ids)?,
        };
        if mode == GradMode::Inputs {
            tape.retain_grad(x);
        }
        let (layers, state) = match c.architecture {
            Architecture::Transformer => {
                (transformer::prepare(c, &weights, &mut tape, x)?, transformer::initial_state(&weights))
            }
            Architecture::Rnn => {
                (rnn::prepare(c, &weights, &mut tape, x)?, rnn::initial_state(c, &weights, &mut tape, x, ids.len())?)
            }
        };
        let prev = tape.constant(Tensor::zeros(&[c.hidden_dim]));
        let enc = Encoded { e, x, cross_mask: super::cross_attention_mask(ids), layers };
        Ok(Self { agent, tape, weights, enc, state, prev, cand_proj: None, step: 0 })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn embeddings(&self) -> NodeId {
        self.enc.e
    }

    pub fn features(&self) -> NodeId {
        self.enc.x
    }

    /// Parameter nodes in the agent's parameter order.
    pub fn parameter_nodes(&self) -> &[NodeId] {
        self.weights.ids()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Scores the candidates of `obs` from the current state.
    pub fn step(&mut self, obs: &Observation) -> Result<StepOutput> {
        if obs.is_empty() {
            return Err(AgentError::NoCandidates);
        }
        let c = &self.agent.config;
        let rows: Vec<Vec<f64>> = obs.candidates.iter().map(|v| v.to_vec()).collect();
        let feats = self.tape.constant(Tensor::from_rows(&rows)?);
        let w = &self.weights;
        let tape = &mut self.tape;
        let proj = tape.matmul(feats, w.get("cand_w"))?;
        let proj = tape.add(proj, w.get("cand_b"))?;
        let proj = tape.tanh(proj)?;
        let (state, logits, alpha_heads) = match c.architecture {
            Architecture::Transformer => {
                transformer::step(c, w, tape, &self.enc, self.state, self.prev, proj, self.step)?
            }
            Architecture::Rnn => rnn::step(c, w, tape, &self.enc, self.state, self.prev, proj, self.step)?,
        };
        let probs = tape.softmax(logits)?;
        self.state = state;
        self.cand_proj = Some(proj);
        self.step += 1;
        Ok(StepOutput { probs, logits, alpha_heads })
    }

    /// Commits the action taken after the latest [`Session::step`].
    pub fn act(&mut self, action: usize) -> Result<()> {
        let proj = self.cand_proj.expect("act follows step");
        self.prev = self.tape.row(proj, action)?;
        Ok(())
    }

    pub fn probs(&self, out: &StepOutput) -> Vec<f64> {
        self.tape.value(out.probs).data().to_vec()
    }

    pub fn trace(&self, out: &StepOutput, action: usize, node: usize) -> StepTrace {
        let alpha_heads: Vec<Vec<f64>> =
            out.alpha_heads.iter().map(|&a| self.tape.value(a).data().to_vec()).collect();
        StepTrace {
            step: self.step - 1,
            node,
            probs: self.probs(out),
            action,
            alpha: self.agent.config.head_reduction.reduce(&alpha_heads),
            alpha_heads,
            value_vectors: self.enc.layers.value_vectors.clone(),
            x: self.tape.value(self.enc.x).clone(),
            e: self.tape.value(self.enc.e).clone(),
        }
    }
}

/// Token embeddings of `ids` under the agent's embedding table.
pub fn embed(agent: &Agent, ids: &[usize]) -> Result<Tensor> {
    Ok(eval(&Op::Embedding { ids: ids.to_vec() }, &[agent.params.get("tok_emb")?])?)
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Greedy,
    /// Take these candidate indices in order, whatever the agent prefers.
    Forced(&'a [usize]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stop,
    StepCap,
    ForcedEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepTrace>,
    /// Start node followed by every node moved to.
    pub path: Vec<usize>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn final_node(&self) -> usize {
        *self.path.last().expect("path holds the start node")
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn checked_action(step: usize, action: usize, obs: &Observation) -> Result<usize> {
    if action >= obs.len() {
        return Err(AgentError::ForcedAction { step, action, candidates: obs.len() });
    }
    Ok(action)
}

/// Runs the agent from `start`, stopping on STOP, at the end of a forced
/// action list, or at the step cap.
pub fn rollout(agent: &Agent, graph: &NavGraph, ids: &[usize], start: usize, policy: Policy) -> Result<Trajectory> {
    let mut session = Session::new(agent, ids, GradMode::Frozen, None)?;
    let mut node = start;
    let mut steps = Vec::new();
    let mut path = vec![start];
    for t in 0..agent.config.step_cap {
        if let Policy::Forced(list) = policy {
            if t >= list.len() {
                return Ok(Trajectory { steps, path, termination: Termination::ForcedEnd });
            }
        }
        let obs = graph.observe(node)?;
        let out = session.step(&obs)?;
        let action = match policy {
            Policy::Greedy => argmax(session.tape.value(out.probs).data()),
            Policy::Forced(list) => checked_action(t, list[t], &obs)?,
        };
        steps.push(session.trace(&out, action, node));
        if action == 0 {
            return Ok(Trajectory { steps, path, termination: Termination::Stop });
        }
        session.act(action)?;
        node = obs.targets[action];
        path.push(node);
    }
    Ok(Trajectory { steps, path, termination: Termination::StepCap })
}

/// A session replayed through a forced action prefix, positioned after the
/// decision at step `prefix.len()`.
pub struct Replay<'a> {
    pub session: Session<'a>,
    pub output: StepOutput,
    pub observation: Observation,
}

impl Replay<'_> {
    pub fn probs(&self) -> Vec<f64> {
        self.session.probs(&self.output)
    }
}

/// Starts fresh at `start`, forces `prefix`, then evaluates the next decision.
pub fn replay_step<'a>(
    agent: &'a Agent,
    graph: &NavGraph,
    ids: &[usize],
    start: usize,
    prefix: &[usize],
    mode: GradMode,
    embeddings: Option<&Tensor>,
) -> Result<Replay<'a>> {
    if prefix.len() >= agent.config.step_cap {
        return Err(AgentError::ForcedAction { step: prefix.len(), action: 0, candidates: 0 });
    }
    let mut session = Session::new(agent, ids, mode, embeddings)?;
    let mut node = start;
    for (t, &a) in prefix.iter().enumerate() {
        let obs = graph.observe(node)?;
        session.step(&obs)?;
        let a = checked_action(t, a, &obs)?;
        session.act(a)?;
        node = obs.targets[a];
    }
    let observation = graph.observe(node)?;
    let output = session.step(&observation)?;
    Ok(Replay { session, output, observation })
}

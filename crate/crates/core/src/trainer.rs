//! Teacher-forced imitation learning and navigation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{rollout, Agent, AgentError, Architecture, GradMode, Policy, Session, Termination, Trajectory};
use crate::navworld::{Dataset, Episode, WorldError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no episodes to train or evaluate on")]
    Empty,
    #[error("training diverged at epoch {epoch}; last finite batch loss {last_finite}")]
    Diverged { epoch: usize, last_finite: f64 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub optimizer: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            epochs: 60,
            batch_size: 8,
            seed: 42,
            clip_norm: 5.0,
            momentum: 0.9,
            optimizer: "sgd_momentum".into(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the step size tuned per architecture.
    pub fn for_architecture(arch: Architecture) -> Self {
        let learning_rate = match arch {
            Architecture::Transformer => 0.02,
            Architecture::Rnn => 0.05,
        };
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be at least 1".into()));
        }
        if self.optimizer != "sgd_momentum" {
            return Err(TrainError::Config(format!("unknown optimizer '{}'", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean negative log-likelihood per decision over the epoch.
    pub loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Loss of the untrained agent on the training episodes.
    pub initial_loss: f64,
    pub curve: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(self.initial_loss, |e| e.loss)
    }
}

/// Summed negative log-likelihood of the expert actions and the step count.
/// With `with_grad`, also returns the gradient of the sum for every parameter.
pub fn episode_nll(
    agent: &Agent,
    dataset: &Dataset,
    episode: &Episode,
    with_grad: bool,
) -> Result<(f64, usize, Option<Vec<Tensor>>)> {
    let graph = dataset.graph_of(episode);
    let expert = episode.expert_actions(graph)?;
    let mode = if with_grad { GradMode::Params } else { GradMode::Frozen };
    let mut s = Session::new(agent, &episode.instruction.ids, mode, None)?;
    let mut terms = Vec::with_capacity(expert.len());
    for (node, &a) in episode.path.iter().zip(&expert) {
        let obs = graph.observe(*node)?;
        let out = s.step(&obs)?;
        let tape = s.tape_mut();
        let p = tape.index(out.probs, a).map_err(AgentError::from)?;
        terms.push(tape.log(p).map_err(AgentError::from)?);
        if a != 0 {
            s.act(a)?;
        }
    }
    let tape = s.tape_mut();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).map_err(AgentError::from)?;
    }
    let nll = tape.scale(total, -1.0).map_err(AgentError::from)?;
    let value = tape.value(nll).item();
    if !with_grad {
        return Ok((value, expert.len(), None));
    }
    s.tape_mut().backward(nll).map_err(AgentError::from)?;
    let grads = s
        .parameter_nodes()
        .iter()
        .zip(agent.params.iter())
        .map(|(&id, p)| s.tape().grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((value, expert.len(), Some(grads)))
}

/// Mean per-decision negative log-likelihood over `episodes`.
pub fn mean_nll(agent: &Agent, dataset: &Dataset, episodes: &[&Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(TrainError::Empty);
    }
    let parts: Vec<(f64, usize)> = episodes
        .par_iter()
        .map(|ep| episode_nll(agent, dataset, ep, false).map(|(l, n, _)| (l, n)))
        .collect::<Result<_>>()?;
    let (loss, steps) = parts.iter().fold((0.0, 0), |(l, n), &(a, b)| (l + a, n + b));
    Ok(loss / steps as f64)
}

/// Trains `agent` in place on the training split with SGD plus momentum
/// and global gradient-norm clipping.
pub fn imitation_train(agent: &mut Agent, dataset: &Dataset, episodes: &[&Episode], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(TrainError::Empty);
    }
    let initial_loss = mean_nll(agent, dataset, episodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Tensor> = agent.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut last_finite = initial_loss;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, usize, Option<Vec<Tensor>>)> = batch
                .par_iter()
                .map(|&i| episode_nll(agent, dataset, episodes[i], true))
                .collect::<Result<_>>()?;
            let steps: usize = results.iter().map(|r| r.1).sum();
            let loss: f64 = results.iter().map(|r| r.0).sum();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, last_finite });
            }
            last_finite = loss / steps as f64;
            epoch_loss += loss;
            epoch_steps += steps;
            let mut grads: Vec<Tensor> = agent.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
            for (_, _, g) in &results {
                for (acc, gi) in grads.iter_mut().zip(g.as_ref().expect("gradients requested")) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b / steps as f64;
                    }
                }
            }
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, last_finite });
            }
            let clip = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
            for ((p, v), g) in agent.params.iter_mut().zip(&mut velocity).zip(&grads) {
                if !p.trainable {
                    continue;
                }
                for ((w, vel), gi) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = config.momentum * *vel + clip * gi;
                    *w -= config.learning_rate * *vel;
                }
            }
        }
        curve.push(EpochLoss { epoch, loss: epoch_loss / epoch_steps as f64, steps: epoch_steps });
    }
    Ok(TrainOutcome { initial_loss, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: String,
    pub success: bool,
    pub shortest: usize,
    pub taken: usize,
    pub termination: Termination,
}

impl EpisodeOutcome {
    pub fn spl(&self) -> f64 {
        if self.success {
            self.shortest as f64 / self.taken.max(self.shortest) as f64
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub sr: f64,
    pub spl: f64,
    pub episodes: usize,
}

impl NavMetrics {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(TrainError::Empty);
        }
        let n = outcomes.len() as f64;
        Ok(Self {
            sr: outcomes.iter().filter(|o| o.success).count() as f64 / n,
            spl: outcomes.iter().map(EpisodeOutcome::spl).sum::<f64>() / n,
            episodes: outcomes.len(),
        })
    }
}

/// Success means choosing STOP at the goal node. Path lengths count edges.
pub fn episode_outcome(episode: &Episode, trajectory: &Trajectory) -> EpisodeOutcome {
    EpisodeOutcome {
        episode: episode.id.clone(),
        success: trajectory.termination == Termination::Stop && trajectory.final_node() == episode.goal(),
        shortest: episode.move_count(),
        taken: trajectory.path.len() - 1,
        termination: trajectory.termination,
    }
}

/// Greedy rollouts of every episode.
pub fn navigation_outcomes(agent: &Agent, dataset: &Dataset, episodes: &[&Episode]) -> Result<Vec<EpisodeOutcome>> {
    episodes
        .par_iter()
        .map(|ep| {
            let traj = rollout(agent, dataset.graph_of(ep), &ep.instruction.ids, ep.start, Policy::Greedy)?;
            Ok(episode_outcome(ep, &traj))
        })
        .collect()
}

pub fn evaluate_navigation(agent: &Agent, dataset: &Dataset, episodes: &[&Episode]) -> Result<NavMetrics> {
    NavMetrics::from_outcomes(&navigation_outcomes(agent, dataset, episodes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::navworld::{DatasetConfig, SplitName};

    fn small() -> Dataset {
        Dataset::generate(&DatasetConfig { graph_count: 6, episodes_per_graph: 6, ..DatasetConfig::default() }).unwrap()
    }

    fn agent(ds: &Dataset, arch: Architecture) -> Agent {
        let mut c = AgentConfig::for_dataset(arch, ds);
        c.embed_dim = 8;
        c.hidden_dim = 8;
        c.heads = 2;
        c.encoder_layers = 1;
        Agent::new(c, 3).unwrap()
    }

    fn quick(lr: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, epochs: 2, batch_size: 4, ..TrainConfig::default() }
    }

    fn outcome(shortest: usize, taken: usize, success: bool) -> EpisodeOutcome {
        EpisodeOutcome { episode: "e".into(), success, shortest, taken, termination: Termination::Stop }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small();
        for arch in Architecture::ALL {
            let mut a = agent(&ds, arch);
            let before = a.clone();
            let out = imitation_train(&mut a, &ds, &ds.episodes_in(SplitName::Train), &quick(0.0)).unwrap();
            assert_eq!(a, before);
            assert!((out.curve[0].loss - out.initial_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let ds = small();
        let eps = ds.episodes_in(SplitName::Train);
        let cfg = TrainConfig { epochs: 4, ..quick(0.05) };
        let mut a = agent(&ds, Architecture::Rnn);
        let mut b = agent(&ds, Architecture::Rnn);
        let ra = imitation_train(&mut a, &ds, &eps, &cfg).unwrap();
        let rb = imitation_train(&mut b, &ds, &eps, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.final_loss() < ra.initial_loss);
    }

    #[test]
    fn loss_matches_step_probabilities() {
        let ds = small();
        for arch in Architecture::ALL {
            let a = agent(&ds, arch);
            let ep = ds.episodes_in(SplitName::Train)[0];
            let graph = ds.graph_of(ep);
            let expert = ep.expert_actions(graph).unwrap();
            let traj = rollout(&a, graph, &ep.instruction.ids, ep.start, Policy::Forced(&expert)).unwrap();
            let direct: f64 = traj.steps.iter().map(|s| -s.chosen_prob().ln()).sum();
            let (nll, steps, _) = episode_nll(&a, &ds, ep, false).unwrap();
            assert_eq!(steps, expert.len());
            assert!((nll - direct).abs() < 1e-10, "{nll} vs {direct}");
        }
    }

    #[test]
    fn expert_and_stop_policies() {
        let ds = small();
        let a = agent(&ds, Architecture::Transformer);
        let eps = ds.episodes_in(SplitName::ValSeen);
        let mut expert_out = Vec::new();
        let mut stop_out = Vec::new();
        for ep in &eps {
            let graph = ds.graph_of(ep);
            let expert = ep.expert_actions(graph).unwrap();
            let t = rollout(&a, graph, &ep.instruction.ids, ep.start, Policy::Forced(&expert)).unwrap();
            expert_out.push(episode_outcome(ep, &t));
            let t = rollout(&a, graph, &ep.instruction.ids, ep.start, Policy::Forced(&[0])).unwrap();
            stop_out.push(episode_outcome(ep, &t));
        }
        let m = NavMetrics::from_outcomes(&expert_out).unwrap();
        assert_eq!((m.sr, m.spl), (1.0, 1.0));
        let m = NavMetrics::from_outcomes(&stop_out).unwrap();
        assert_eq!((m.sr, m.spl), (0.0, 0.0));
    }

    #[test]
    fn spl_weights_path_length() {
        assert_eq!(outcome(3, 6, true).spl(), 0.5);
        assert_eq!(outcome(3, 3, true).spl(), 1.0);
        assert_eq!(outcome(3, 3, false).spl(), 0.0);
        let m = NavMetrics::from_outcomes(&[outcome(2, 4, true), outcome(2, 2, false), outcome(4, 4, true)]).unwrap();
        assert!((m.sr - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.spl - 0.5).abs() < 1e-12);
        assert!(m.spl <= m.sr);
        assert!(NavMetrics::from_outcomes(&[]).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { optimizer: "adam".into(), ..TrainConfig::default() }.validate().is_err());
    }
}

//! Attention-based navigation policies.
//!
//! Two architectures share one decision loop ([`Session`]):
//!
//! * **transformer**: a self-attention instruction encoder and a persistent
//!   state token. Each step the state (plus a step embedding) queries the
//!   linguistic features with multi-head cross-attention; the attended
//!   context, the previous action's view and the old state produce the new
//!   state, which scores the candidates by scaled dot product.
//! * **rnn**: a bidirectional GRU encoder, soft attention with a fully
//!   connected value transform, and a GRU decoder fed with the previous
//!   action's view and the attended context.
//!
//! Candidate 0 is always STOP. Cross-attention only reaches content
//! positions (never `<pad>`, `<bos>` or `<eos>`); when an instruction has no
//! such position, attention falls back to position 0.

mod checkpoint;
mod rnn;
mod session;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use session::{
    argmax, embed, replay_step, rollout, GradMode, Policy, Replay, Session, StepOutput, StepTrace, Termination, Trajectory,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::navworld::{vocab, Dataset, WorldError};
use crate::tensor::{ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("instruction has {len} tokens, maximum is {max}")]
    InstructionTooLong { len: usize, max: usize },
    #[error("observation has no candidates")]
    NoCandidates,
    #[error("forced action {action} at step {step} is out of range for {candidates} candidates")]
    ForcedAction { step: usize, action: usize, candidates: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Transformer,
    Rnn,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::Transformer, Architecture::Rnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Transformer => "transformer",
            Architecture::Rnn => "rnn",
        }
    }

    /// Replacement token used by the token-replacement erasure.
    pub fn replacement_token(self) -> usize {
        match self {
            Architecture::Transformer => vocab::MASK,
            Architecture::Rnn => vocab::UNK,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Architecture::Transformer),
            "rnn" => Ok(Architecture::Rnn),
            _ => Err(AgentError::Checkpoint(format!("unknown architecture '{s}'"))),
        }
    }
}

/// How multi-head attention weights collapse to one weight per token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Mean,
    Max,
    Head(usize),
}

impl HeadReduction {
    pub fn reduce(self, heads: &[Vec<f64>]) -> Vec<f64> {
        let len = heads.first().map_or(0, Vec::len);
        match self {
            HeadReduction::Mean => (0..len).map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / heads.len() as f64).collect(),
            HeadReduction::Max => (0..len).map(|i| heads.iter().map(|h| h[i]).fold(0.0, f64::max)).collect(),
            HeadReduction::Head(k) => heads[k.min(heads.len() - 1)].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    /// Candidate feature width: landmark one-hots plus four orientation terms.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Attention heads (transformer only; the rnn agent has a single head).
    pub heads: usize,
    pub encoder_layers: usize,
    pub step_cap: usize,
    pub max_instruction_len: usize,
    pub head_reduction: HeadReduction,
}

impl AgentConfig {
    pub fn new(architecture: Architecture, vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            architecture,
            vocab_size,
            feature_dim,
            embed_dim: 32,
            hidden_dim: 64,
            heads: 4,
            encoder_layers: 2,
            step_cap: 8,
            max_instruction_len: 48,
            head_reduction: HeadReduction::Mean,
        }
    }

    pub fn for_dataset(architecture: Architecture, dataset: &Dataset) -> Self {
        Self::new(architecture, dataset.vocab.len(), dataset.config.world.feature_dim())
    }

    pub fn head_count(&self) -> usize {
        match self.architecture {
            Architecture::Transformer => self.heads,
            Architecture::Rnn => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim, self.heads, self.step_cap];
        if dims.contains(&0) || self.max_instruction_len == 0 {
            return Err(AgentError::Checkpoint("agent dimensions must be at least 1".into()));
        }
        match self.architecture {
            Architecture::Transformer if !self.hidden_dim.is_multiple_of(self.heads) => Err(AgentError::Checkpoint(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ))),
            Architecture::Rnn if !self.hidden_dim.is_multiple_of(2) => {
                Err(AgentError::Checkpoint("rnn hidden_dim must be even (two encoder directions)".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A policy: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub params: ParamSet,
}

impl Agent {
    /// Fresh parameters: Glorot-uniform matrices, zero biases, zero rows for
    /// the `<pad>`, `<unk>` and `<mask>` embeddings.
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), params: ParamSet::new() };
        match config.architecture {
            Architecture::Transformer => transformer::init(&config, &mut init)?,
            Architecture::Rnn => rnn::init(&config, &mut init)?,
        }
        Ok(Self { config, params: init.params })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Same layout with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut a = self.clone();
        for p in a.params.iter_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        a
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-a..a)).collect();
        self.params.insert(name, Tensor::matrix(rows, cols, data)?, true)?;
        Ok(())
    }

    fn uniform(&mut self, name: &str, shape: &[usize], a: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-a..a)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data)?, true)?;
        Ok(())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape), true)?;
        Ok(())
    }

    fn embedding(&mut self, name: &str, vocab_size: usize, dim: usize) -> Result<()> {
        let mut data = Vec::with_capacity(vocab_size * dim);
        for id in 0..vocab_size {
            let silent = matches!(id, vocab::PAD | vocab::UNK | vocab::MASK);
            data.extend((0..dim).map(|_| if silent { 0.0 } else { self.rng.gen_range(-0.5..0.5) }));
        }
        self.params.insert(name, Tensor::matrix(vocab_size, dim, data)?, true)?;
        Ok(())
    }
}

/// Key mask for self-attention: every non-`<pad>` position.
pub(crate) fn self_attention_mask(ids: &[usize]) -> Vec<bool> {
    with_fallback(ids.iter().map(|&id| id != vocab::PAD).collect())
}

/// Positions the decision-time cross-attention may read: content words and
/// replacement tokens, never `<pad>`, `<bos>` or `<eos>`.
pub fn cross_attention_mask(ids: &[usize]) -> Vec<bool> {
    with_fallback(ids.iter().map(|&id| !matches!(id, vocab::PAD | vocab::BOS | vocab::EOS)).collect())
}

fn with_fallback(mut mask: Vec<bool>) -> Vec<bool> {
    if !mask.iter().any(|&m| m) {
        if let Some(first) = mask.first_mut() {
            *first = true;
        }
    }
    mask
}

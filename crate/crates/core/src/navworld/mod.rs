//! Synthetic navigation worlds, instruction/expert-path episodes and their
//! per-step oracle rationales.
//!
//! Every node carries a colour+object landmark; the view toward a neighbour
//! shows that neighbour's landmark. Landmarks are assigned so that the
//! neighbours of any node are pairwise distinct, which makes each
//! "go to <colour> <object>" clause pick out exactly one candidate. The
//! clause's two landmark tokens are the oracle rationale for that step and
//! the "stop" token is the rationale for the final STOP decision.

mod dataset;
mod episode;
mod graph;
pub mod vocab;

pub use dataset::{dataset_split, Dataset, DatasetConfig, EpisodeRecord, Split, SplitName, SplitRatios};
pub use episode::{describe_path, generate_episode, matching_candidates, Episode, Instruction};
pub use graph::{generate_world, Edge, Landmark, NavGraph, Observation, ViewFeature, WorldConfig};
pub use vocab::Vocabulary;

use thiserror::Error;

use crate::records::RecordError;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("path step {from} -> {to} is not an edge")]
    BrokenPath { from: usize, to: usize },
    #[error("no disambiguating episode found after {attempts} attempts")]
    NoEpisode { attempts: usize },
    #[error(transparent)]
    Records(#[from] RecordError),
}

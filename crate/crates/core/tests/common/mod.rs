#![allow(dead_code)]

use vlnfaith::agents::{Agent, AgentConfig, Architecture};
use vlnfaith::navworld::{Dataset, DatasetConfig, SplitName};
use vlnfaith::trainer::{imitation_train, TrainConfig};

pub fn small_dataset() -> Dataset {
    Dataset::generate(&DatasetConfig { graph_count: 6, episodes_per_graph: 10, ..DatasetConfig::default() }).unwrap()
}

pub fn tiny_config(arch: Architecture, ds: &Dataset) -> AgentConfig {
    let mut c = AgentConfig::for_dataset(arch, ds);
    c.embed_dim = 12;
    c.hidden_dim = 16;
    c.heads = 2;
    c.encoder_layers = 1;
    c
}

/// A small agent trained for a few epochs: cheap, but with peaked
/// decisions so that erasures change something.
pub fn tiny_agent(arch: Architecture, ds: &Dataset) -> Agent {
    let mut agent = Agent::new(tiny_config(arch, ds), 5).unwrap();
    let cfg = TrainConfig { epochs: 6, ..TrainConfig::for_architecture(arch) };
    imitation_train(&mut agent, ds, &ds.episodes_in(SplitName::Train), &cfg).unwrap();
    agent
}

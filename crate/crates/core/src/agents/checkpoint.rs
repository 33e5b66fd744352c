use std::collections::BTreeMap;
use std::path::Path;

use super::{Agent, AgentConfig, AgentError, Architecture, Result};
use crate::tensor::{load_params, save_params};

/// Writes the agent's parameters plus a manifest carrying the architecture
/// tag, the configuration and the vocabulary hash.
pub fn save_checkpoint(agent: &Agent, dir: &Path, vocab_hash: &str) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("architecture".to_string(), agent.architecture().to_string());
    meta.insert(
        "config".to_string(),
        serde_json::to_string(&agent.config).map_err(|e| AgentError::Checkpoint(e.to_string()))?,
    );
    meta.insert("vocab_hash".to_string(), vocab_hash.to_string());
    save_params(dir, &agent.params, &meta)?;
    Ok(())
}

/// Loads a checkpoint, requiring the `expected` architecture. Returns the
/// agent and the stored vocabulary hash.
pub fn load_checkpoint(dir: &Path, expected: Option<Architecture>) -> Result<(Agent, String)> {
    let (params, meta) = load_params(dir)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| AgentError::Checkpoint(format!("manifest lacks '{k}'")));
    let arch: Architecture = field("architecture")?.parse()?;
    if let Some(want) = expected {
        if want != arch {
            return Err(AgentError::Checkpoint(format!("expected a {want} checkpoint, found {arch}")));
        }
    }
    let config: AgentConfig =
        serde_json::from_str(field("config")?).map_err(|e| AgentError::Checkpoint(format!("config: {e}")))?;
    if config.architecture != arch {
        return Err(AgentError::Checkpoint("architecture tag disagrees with config".into()));
    }
    let layout = Agent::new(config.clone(), 0)?;
    let same_layout = layout.params.len() == params.len()
        && layout.params.iter().zip(params.iter()).all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
    if !same_layout {
        return Err(AgentError::Checkpoint("parameter layout does not match the configuration".into()));
    }
    Ok((Agent { config, params }, field("vocab_hash")?.clone()))
}

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::episode::{generate_episode, Episode, Instruction};
use super::graph::{generate_world, NavGraph, WorldConfig};
use super::vocab::Vocabulary;
use super::WorldError;
use crate::records::{read_document, read_records, write_document, write_records};

pub const DATASET_FORMAT: &str = "vlnfaith-dataset";
pub const GRAPH_FORMAT: &str = "vlnfaith-graph";
pub const EPISODE_FORMAT: &str = "vlnfaith-episodes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValSeen,
    ValUnseen,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::ValSeen, SplitName::ValUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::ValSeen => "val_seen",
            SplitName::ValUnseen => "val_unseen",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| WorldError::Config(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val_seen: f64,
    pub val_unseen: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val_seen: 0.1, val_unseen: 0.2 }
    }
}

/// Episode indices per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val_seen: Vec<usize>,
    pub val_unseen: Vec<usize>,
    pub unseen_graphs: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::ValSeen => &self.val_seen,
            SplitName::ValUnseen => &self.val_unseen,
        }
    }
}

/// Reserves `round(graphs * val_unseen)` whole graphs for `val_unseen`, then
/// divides the remaining episodes between train and `val_seen` in proportion.
pub fn dataset_split(graph_count: usize, episodes: &[Episode], ratios: SplitRatios, seed: u64) -> Result<Split, WorldError> {
    if graph_count < 2 {
        return Err(WorldError::Config("at least two graphs are needed to split".into()));
    }
    let r = [ratios.train, ratios.val_seen, ratios.val_unseen];
    if r.iter().any(|&x| x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(WorldError::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs: Vec<usize> = (0..graph_count).collect();
    graphs.shuffle(&mut rng);
    let n_unseen = ((graph_count as f64) * ratios.val_unseen).round() as usize;
    let mut unseen_graphs = graphs[..n_unseen.min(graph_count)].to_vec();
    unseen_graphs.sort_unstable();

    let mut split = Split { unseen_graphs, ..Split::default() };
    let mut seen = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if split.unseen_graphs.contains(&ep.graph) {
            split.val_unseen.push(i);
        } else {
            seen.push(i);
        }
    }
    seen.shuffle(&mut rng);
    let seen_share = ratios.train + ratios.val_seen;
    let n_val_seen = if seen_share > 0.0 { ((seen.len() as f64) * ratios.val_seen / seen_share).round() as usize } else { 0 };
    split.val_seen = seen[..n_val_seen].to_vec();
    split.train = seen[n_val_seen..].to_vec();
    split.val_seen.sort_unstable();
    split.train.sort_unstable();
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub graph_count: usize,
    pub episodes_per_graph: usize,
    pub min_moves: usize,
    pub max_moves: usize,
    pub ratios: SplitRatios,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            world: WorldConfig::default(),
            graph_count: 12,
            episodes_per_graph: 50,
            min_moves: 2,
            max_moves: 4,
            ratios: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    pub graphs: Vec<NavGraph>,
    pub episodes: Vec<Episode>,
    pub split: Split,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self, WorldError> {
        let vocab = Vocabulary::build(&config.world.colors, &config.world.objects);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut graphs = Vec::with_capacity(config.graph_count);
        let mut episodes = Vec::with_capacity(config.graph_count * config.episodes_per_graph);
        for gi in 0..config.graph_count {
            let graph = generate_world(rng.gen(), &config.world)?;
            for _ in 0..config.episodes_per_graph {
                let ep = generate_episode(&graph, gi, &vocab, rng.gen(), config.min_moves..=config.max_moves)?;
                episodes.push(ep);
            }
            graphs.push(graph);
        }
        let split = dataset_split(graphs.len(), &episodes, config.ratios, config.seed)?;
        Ok(Self { config: config.clone(), vocab, graphs, episodes, split })
    }

    pub fn episodes_in(&self, name: SplitName) -> Vec<&Episode> {
        self.split.get(name).iter().map(|&i| &self.episodes[i]).collect()
    }

    pub fn graph_of(&self, episode: &Episode) -> &NavGraph {
        &self.graphs[episode.graph]
    }

    /// Mean oracle rationale size over every step of the given episodes.
    pub fn mean_rationale_len<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> f64 {
        let (mut total, mut count) = (0usize, 0usize);
        for ep in episodes {
            for r in &ep.rationale {
                total += r.len();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total as f64 / count as f64
        }
    }

    fn graph_file(index: usize) -> String {
        format!("graphs/graph_{index:03}.json")
    }

    /// Writes `dataset.json`, one graph file per graph and one
    /// `<split>.jsonl` episode file per split into `dir`.
    pub fn save(&self, dir: &Path, provenance: &serde_json::Value) -> Result<(), WorldError> {
        let files: Vec<String> = (0..self.graphs.len()).map(Self::graph_file).collect();
        for (g, f) in self.graphs.iter().zip(&files) {
            write_document(&dir.join(f), GRAPH_FORMAT, provenance, g)?;
        }
        for name in SplitName::ALL {
            let rows = self.split.get(name).iter().map(|&i| {
                let ep = &self.episodes[i];
                EpisodeRecord {
                    id: ep.id.clone(),
                    graph_file: files[ep.graph].clone(),
                    instruction: ep.instruction.tokens(&self.vocab).into_iter().map(String::from).collect(),
                    start: ep.start,
                    path: ep.path.clone(),
                    rationale: ep.rationale.clone(),
                }
            });
            write_records(&dir.join(format!("{name}.jsonl")), EPISODE_FORMAT, provenance, rows)?;
        }
        let manifest = json!({
            "config": self.config,
            "vocabulary": self.vocab,
            "graphs": files,
            "splits": SplitName::ALL.iter().map(|n| format!("{n}.jsonl")).collect::<Vec<_>>(),
            "unseen_graphs": self.split.unseen_graphs,
        });
        write_document(&dir.join("dataset.json"), DATASET_FORMAT, provenance, &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, WorldError> {
        #[derive(Deserialize)]
        struct Manifest {
            config: DatasetConfig,
            vocabulary: Vocabulary,
            graphs: Vec<String>,
            unseen_graphs: Vec<usize>,
        }
        let (_, m): (_, Manifest) = read_document(&dir.join("dataset.json"), DATASET_FORMAT)?;
        let mut graphs = Vec::with_capacity(m.graphs.len());
        for f in &m.graphs {
            let (_, g): (_, NavGraph) = read_document(&dir.join(f), GRAPH_FORMAT)?;
            graphs.push(g);
        }
        let mut episodes = Vec::new();
        let mut split = Split { unseen_graphs: m.unseen_graphs, ..Split::default() };
        for name in SplitName::ALL {
            let (_, rows): (_, Vec<EpisodeRecord>) = read_records(&dir.join(format!("{name}.jsonl")), EPISODE_FORMAT)?;
            for r in rows {
                let graph = m
                    .graphs
                    .iter()
                    .position(|f| *f == r.graph_file)
                    .ok_or_else(|| WorldError::Config(format!("episode {} references unknown graph {}", r.id, r.graph_file)))?;
                let idx = episodes.len();
                episodes.push(Episode {
                    id: r.id,
                    graph,
                    instruction: Instruction::from_tokens(&m.vocabulary, &r.instruction),
                    start: r.start,
                    path: r.path,
                    rationale: r.rationale,
                });
                match name {
                    SplitName::Train => split.train.push(idx),
                    SplitName::ValSeen => split.val_seen.push(idx),
                    SplitName::ValUnseen => split.val_unseen.push(idx),
                }
            }
        }
        Ok(Self { config: m.config, vocab: m.vocabulary, graphs, episodes, split })
    }
}

/// On-disk form of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub graph_file: String,
    pub instruction: Vec<String>,
    pub start: usize,
    pub path: Vec<usize>,
    pub rationale: Vec<Vec<usize>>,
}

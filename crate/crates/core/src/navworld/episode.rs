use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NavGraph, Observation};
use super::vocab::{self, Vocabulary};
use super::WorldError;

/// Token-id sequence, `<bos> ... <eos>`, possibly `<pad>`-suffixed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub ids: Vec<usize>,
}

impl Instruction {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn from_tokens(vocab: &Vocabulary, tokens: &[impl AsRef<str>]) -> Self {
        Self { ids: tokens.iter().map(|t| vocab.id_or_unk(t.as_ref())).collect() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` at positions an erasure may touch (anything but the special tokens).
    pub fn erasable_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| !vocab::is_special(id)).collect()
    }

    pub fn content_count(&self) -> usize {
        self.ids.iter().filter(|&&id| !vocab::is_special(id)).count()
    }

    /// Same length, every position `<pad>`.
    pub fn all_pad(&self) -> Self {
        Self { ids: vec![vocab::PAD; self.ids.len()] }
    }

    pub fn tokens<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.ids.iter().map(|&id| vocab.token(id)).collect()
    }
}

/// One instruction-following task with its expert path and per-step oracle rationale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub graph: usize,
    pub instruction: Instruction,
    pub start: usize,
    /// Node sequence from start to goal; the expert then chooses STOP.
    pub path: Vec<usize>,
    /// One token-index set per expert action (moves, then STOP).
    pub rationale: Vec<Vec<usize>>,
}

impl Episode {
    pub fn goal(&self) -> usize {
        *self.path.last().expect("non-empty path")
    }

    pub fn move_count(&self) -> usize {
        self.path.len() - 1
    }

    /// Expert candidate indices, one per step, ending in STOP (0).
    pub fn expert_actions(&self, graph: &NavGraph) -> Result<Vec<usize>, WorldError> {
        let mut actions = Vec::with_capacity(self.path.len());
        for w in self.path.windows(2) {
            let obs = graph.observe(w[0])?;
            actions.push(obs.action_to(w[1]).ok_or(WorldError::BrokenPath { from: w[0], to: w[1] })?);
        }
        actions.push(0);
        Ok(actions)
    }
}

/// Candidates whose landmark words include every landmark word present in
/// `clause`. Non-landmark tokens (grammar, `<unk>`, `<mask>`) constrain
/// nothing, and a clause without any landmark word identifies no candidate.
/// STOP is never matched.
pub fn matching_candidates(graph: &NavGraph, vocab: &Vocabulary, obs: &Observation, clause: &[usize]) -> Vec<usize> {
    let landmark_words: BTreeSet<&str> = clause
        .iter()
        .map(|&id| vocab.token(id))
        .filter(|t| graph.config.colors.iter().any(|c| c == t) || graph.config.objects.iter().any(|o| o == t))
        .collect();
    if landmark_words.is_empty() {
        return Vec::new();
    }
    (1..obs.len())
        .filter(|&c| {
            let words = graph.landmark_words(graph.landmarks[obs.targets[c]]);
            landmark_words.iter().all(|w| words.contains(w))
        })
        .collect()
}

/// Builds "go to <colour> <object> then ... then stop" for `path`, returning
/// the token ids and the per-step rationale indices.
pub fn describe_path(graph: &NavGraph, vocab: &Vocabulary, path: &[usize]) -> (Instruction, Vec<Vec<usize>>) {
    let id = |t: &str| vocab.id(t).expect("grammar and landmark words are in the vocabulary");
    let mut ids = vec![vocab::BOS];
    let mut rationale = Vec::with_capacity(path.len());
    for (i, &node) in path.iter().enumerate().skip(1) {
        if i > 1 {
            ids.push(id("then"));
        }
        ids.push(id("go"));
        ids.push(id("to"));
        let [color, object] = graph.landmark_words(graph.landmarks[node]);
        rationale.push(vec![ids.len(), ids.len() + 1]);
        ids.push(id(color));
        ids.push(id(object));
    }
    ids.push(id("then"));
    rationale.push(vec![ids.len()]);
    ids.push(id("stop"));
    ids.push(vocab::EOS);
    (Instruction::new(ids), rationale)
}

const MAX_ATTEMPTS: usize = 64;

/// Samples a shortest-path episode with `moves` edges drawn from `moves_range`.
pub fn generate_episode(
    graph: &NavGraph,
    graph_index: usize,
    vocab: &Vocabulary,
    seed: u64,
    moves_range: RangeInclusive<usize>,
) -> Result<Episode, WorldError> {
    if moves_range.is_empty() || *moves_range.start() == 0 {
        return Err(WorldError::Config(format!("invalid path length range {moves_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let start = rng.gen_range(0..graph.node_count());
        let dist = graph.distances_from(start);
        let goals: Vec<usize> = (0..graph.node_count()).filter(|&v| moves_range.contains(&dist[v])).collect();
        let Some(&goal) = goals.choose(&mut rng) else { continue };
        let to_goal = graph.distances_from(goal);
        let mut path = vec![start];
        let mut cur = start;
        while cur != goal {
            let next: Vec<usize> = graph.neighbors(cur).filter(|&v| to_goal[v] + 1 == to_goal[cur]).collect();
            cur = *next.choose(&mut rng).expect("shortest path continues");
            path.push(cur);
        }
        let (instruction, rationale) = describe_path(graph, vocab, &path);
        if !clauses_disambiguate(graph, vocab, &path, &instruction, &rationale)? {
            continue;
        }
        return Ok(Episode { id: format!("g{graph_index:03}-s{seed}"), graph: graph_index, instruction, start, path, rationale });
    }
    Err(WorldError::NoEpisode { attempts: MAX_ATTEMPTS })
}

fn clauses_disambiguate(
    graph: &NavGraph,
    vocab: &Vocabulary,
    path: &[usize],
    instruction: &Instruction,
    rationale: &[Vec<usize>],
) -> Result<bool, WorldError> {
    for (step, w) in path.windows(2).enumerate() {
        let obs = graph.observe(w[0])?;
        let clause: Vec<usize> = rationale[step].iter().map(|&i| instruction.ids[i]).collect();
        if matching_candidates(graph, vocab, &obs, &clause) != vec![obs.action_to(w[1]).expect("edge")] {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::super::graph::{generate_world, WorldConfig};
    use super::*;

    fn world() -> (NavGraph, Vocabulary) {
        let c = WorldConfig::default();
        let v = Vocabulary::build(&c.colors, &c.objects);
        (generate_world(42, &c).unwrap(), v)
    }

    #[test]
    fn single_move_instruction_shape() {
        let (g, v) = world();
        let ep = generate_episode(&g, 0, &v, 1, 1..=1).unwrap();
        let toks = ep.instruction.tokens(&v);
        assert_eq!(toks.len(), 8);
        assert_eq!(&toks[..3], &["<bos>", "go", "to"]);
        assert_eq!(&toks[5..], &["then", "stop", "<eos>"]);
        assert_eq!(ep.expert_actions(&g).unwrap().len(), 2);
        assert_eq!(*ep.expert_actions(&g).unwrap().last().unwrap(), 0);
        let [c, o] = g.landmark_words(g.landmarks[ep.path[1]]);
        assert_eq!((toks[3], toks[4]), (c, o));
        assert_eq!(ep.rationale, vec![vec![3, 4], vec![6]]);
    }

    #[test]
    fn rationale_tokens_name_the_expert_edge() {
        let (g, v) = world();
        for seed in 0..30 {
            let ep = generate_episode(&g, 0, &v, seed, 2..=4).unwrap();
            let actions = ep.expert_actions(&g).unwrap();
            assert_eq!(ep.rationale.len(), actions.len());
            assert!(ep.instruction.len() >= 2 + 3 * ep.move_count());
            for (step, w) in ep.path.windows(2).enumerate() {
                assert!(g.has_edge(w[0], w[1]));
                let obs = g.observe(w[0]).unwrap();
                let clause: Vec<usize> = ep.rationale[step].iter().map(|&i| ep.instruction.ids[i]).collect();
                assert_eq!(matching_candidates(&g, &v, &obs, &clause), vec![actions[step]]);
            }
            for set in &ep.rationale {
                assert!(!set.is_empty());
                assert!(set.iter().all(|&i| !vocab::is_special(ep.instruction.ids[i])));
            }
        }
    }

    #[test]
    fn masking_the_rationale_breaks_unique_match() {
        let (g, v) = world();
        for seed in 0..30 {
            let ep = generate_episode(&g, 0, &v, seed, 1..=4).unwrap();
            for (step, &node) in ep.path[..ep.path.len() - 1].iter().enumerate() {
                let obs = g.observe(node).unwrap();
                let masked = vec![vocab::UNK; ep.rationale[step].len()];
                assert_ne!(matching_candidates(&g, &v, &obs, &masked).len(), 1);
            }
        }
    }

    #[test]
    fn infeasible_length_errors() {
        let (g, v) = world();
        assert!(matches!(generate_episode(&g, 0, &v, 0, 40..=50), Err(WorldError::NoEpisode { .. })));
    }
}

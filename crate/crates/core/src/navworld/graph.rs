use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;

/// Parameters of the synthetic world generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub node_count: usize,
    /// Edges added on top of the random spanning tree.
    pub extra_edges: usize,
    pub max_degree: usize,
    pub colors: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            node_count: 12,
            extra_edges: 6,
            max_degree: 4,
            colors: s(&["red", "blue", "green", "yellow", "white", "black"]),
            objects: s(&["lamp", "chair", "door", "table", "sofa", "plant", "stairs", "window"]),
        }
    }
}

impl WorldConfig {
    pub fn landmark_count(&self) -> usize {
        self.colors.len() * self.objects.len()
    }

    pub fn semantic_dim(&self) -> usize {
        self.colors.len() + self.objects.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.semantic_dim() + 4
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.node_count < 4 {
            return Err(WorldError::Config(format!("node_count {} < 4", self.node_count)));
        }
        if self.landmark_count() < 8 {
            return Err(WorldError::Config(format!("only {} landmarks, need at least 8", self.landmark_count())));
        }
        if self.max_degree < 2 {
            return Err(WorldError::Config("max_degree must be at least 2".into()));
        }
        // Neighbours of a node must carry pairwise distinct landmarks, so any
        // node conflicts with at most max_degree * (max_degree - 1) others.
        let needed = self.max_degree * (self.max_degree - 1) + 1;
        if needed > self.landmark_count() {
            return Err(WorldError::Config(format!(
                "max_degree {} needs {needed} distinct landmarks, vocabulary has {}",
                self.max_degree,
                self.landmark_count()
            )));
        }
        Ok(())
    }
}

/// A landmark is one colour and one object, both as indices into the config lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Landmark {
    pub color: usize,
    pub object: usize,
}

/// Candidate view: one-hot landmark encoding plus heading/elevation orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFeature {
    pub semantic: Vec<f64>,
    /// `[sin ψ, cos ψ, sin θ, cos θ]`.
    pub orientation: [f64; 4],
}

impl ViewFeature {
    pub fn new(semantic: Vec<f64>, heading: f64, elevation: f64) -> Self {
        Self { semantic, orientation: [heading.sin(), heading.cos(), elevation.sin(), elevation.cos()] }
    }

    /// The STOP pseudo-view: zero semantics, zero heading and elevation.
    pub fn stop(semantic_dim: usize) -> Self {
        Self::new(vec![0.0; semantic_dim], 0.0, 0.0)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.semantic.clone();
        v.extend_from_slice(&self.orientation);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub heading: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavGraph {
    pub seed: u64,
    pub config: WorldConfig,
    /// Outgoing edges per node, sorted by target id.
    pub adjacency: Vec<Vec<Edge>>,
    /// Landmark seen when looking toward each node.
    pub landmarks: Vec<Landmark>,
}

/// What the agent perceives at a node. Candidate 0 is STOP; the rest follow
/// the outgoing edges in ascending target order.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub node: usize,
    pub candidates: Vec<ViewFeature>,
    pub targets: Vec<usize>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Candidate index leading to `node`, if it is a neighbour.
    pub fn action_to(&self, node: usize) -> Option<usize> {
        self.targets.iter().skip(1).position(|&t| t == node).map(|p| p + 1)
    }
}

pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<NavGraph, WorldError> {
    config.validate()?;
    let n = config.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in 1..n {
        let open: Vec<usize> = order[..i].iter().copied().filter(|&u| adj[u].len() < config.max_degree).collect();
        let &u = open.choose(&mut rng).ok_or_else(|| WorldError::Config("degree cap too small".into()))?;
        let v = order[i];
        adj[u].insert(v);
        adj[v].insert(u);
    }
    let mut added = 0;
    let mut attempts = 0;
    while added < config.extra_edges && attempts < 50 * (config.extra_edges + 1) {
        attempts += 1;
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u == v || adj[u].contains(&v) || adj[u].len() >= config.max_degree || adj[v].len() >= config.max_degree {
            continue;
        }
        adj[u].insert(v);
        adj[v].insert(u);
        added += 1;
    }

    // Distance-2 colouring: every node's neighbours get distinct landmarks.
    let all: Vec<Landmark> = (0..config.colors.len())
        .flat_map(|color| (0..config.objects.len()).map(move |object| Landmark { color, object }))
        .collect();
    let mut landmarks: Vec<Option<Landmark>> = vec![None; n];
    let mut visit: Vec<usize> = (0..n).collect();
    visit.shuffle(&mut rng);
    for &v in &visit {
        let taken: BTreeSet<Landmark> =
            adj[v].iter().flat_map(|&u| adj[u].iter()).filter(|&&w| w != v).filter_map(|&w| landmarks[w]).collect();
        let free: Vec<Landmark> = all.iter().copied().filter(|l| !taken.contains(l)).collect();
        let pick = *free.choose(&mut rng).ok_or_else(|| {
            WorldError::Config(format!("no landmark left for node {v}; vocabulary too small"))
        })?;
        landmarks[v] = Some(pick);
    }

    let mut headings = vec![vec![0.0; n]; n];
    let mut elevations = vec![vec![0.0; n]; n];
    for u in 0..n {
        for &v in &adj[u] {
            if u < v {
                let h = rng.gen_range(0.0..2.0 * PI);
                let e = rng.gen_range(-0.5..0.5);
                headings[u][v] = h;
                headings[v][u] = (h + PI) % (2.0 * PI);
                elevations[u][v] = e;
                elevations[v][u] = -e;
            }
        }
    }

    let adjacency = adj
        .iter()
        .enumerate()
        .map(|(u, ns)| {
            ns.iter().map(|&v| Edge { target: v, heading: headings[u][v], elevation: elevations[u][v] }).collect()
        })
        .collect();
    Ok(NavGraph {
        seed,
        config: config.clone(),
        adjacency,
        landmarks: landmarks.into_iter().map(|l| l.expect("every node coloured")).collect(),
    })
}

impl NavGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[node].iter().map(|e| e.target)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.get(u).is_some_and(|es| es.iter().any(|e| e.target == v))
    }

    pub fn semantic(&self, landmark: Landmark) -> Vec<f64> {
        let mut v = vec![0.0; self.config.semantic_dim()];
        v[landmark.color] = 1.0;
        v[self.config.colors.len() + landmark.object] = 1.0;
        v
    }

    /// Landmark words in instruction order: colour then object.
    pub fn landmark_words(&self, landmark: Landmark) -> [&str; 2] {
        [&self.config.colors[landmark.color], &self.config.objects[landmark.object]]
    }

    pub fn observe(&self, node: usize) -> Result<Observation, WorldError> {
        let edges = self.adjacency.get(node).ok_or(WorldError::UnknownNode(node))?;
        let mut candidates = Vec::with_capacity(edges.len() + 1);
        let mut targets = Vec::with_capacity(edges.len() + 1);
        candidates.push(ViewFeature::stop(self.config.semantic_dim()));
        targets.push(node);
        for e in edges {
            candidates.push(ViewFeature::new(self.semantic(self.landmarks[e.target]), e.heading, e.elevation));
            targets.push(e.target);
        }
        Ok(Observation { node, candidates, targets })
    }

    /// BFS hop distances from `source`; unreachable nodes are `usize::MAX`.
    pub fn distances_from(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.node_count() == 0 || self.distances_from(0).iter().all(|&d| d != usize::MAX)
    }
}

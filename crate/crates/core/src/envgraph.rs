//! Synthetic graph-navigation worlds.
//!
//! A world is a random geometric graph on a square of side [`WORLD_EXTENT`]
//! meters. Node features are a smooth positional code (random Fourier
//! features of the node position, shared by every world of a given feature
//! dimension) plus seeded Gaussian noise, so feature similarity to the goal
//! carries information about geodesic proximity.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type NodeId = usize;

/// Side length of the square the nodes are scattered over, in meters.
pub const WORLD_EXTENT: f64 = 30.0;
/// Length scale of the positional code, in meters.
pub const CODE_LENGTH_SCALE: f64 = 15.0;
const BASIS_SEED: u64 = 0x5EED_F00D;
const GENERATION_ATTEMPTS: usize = 64;
const SHIFT_ATTEMPTS: usize = 32;
const TASK_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub position: [f64; 2],
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldDoc {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_features: Option<Vec<Vec<f64>>>,
}

/// Weighted undirected graph with per-node feature vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "WorldDoc", into = "WorldDoc")]
pub struct GraphWorld {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    seed: u64,
    /// Appearance that instructions describe, when it differs from what the
    /// agent observes (after a drift shift).
    reference_features: Option<Vec<Vec<f64>>>,
    /// Sorted by neighbor id.
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl PartialEq for GraphWorld {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.nodes == other.nodes
            && self.edges == other.edges
            && self.reference_features == other.reference_features
    }
}

impl TryFrom<WorldDoc> for GraphWorld {
    type Error = Error;

    fn try_from(doc: WorldDoc) -> Result<Self> {
        let mut world = GraphWorld::from_parts(doc.nodes, doc.edges, doc.seed)?;
        if let Some(r) = doc.reference_features {
            if r.len() != world.len() || r.iter().any(|f| f.len() != world.feature_dim()) {
                return Err(Error::InvalidParameter("reference features do not match nodes".into()));
            }
            world.reference_features = Some(r);
        }
        Ok(world)
    }
}

impl From<GraphWorld> for WorldDoc {
    fn from(w: GraphWorld) -> Self {
        WorldDoc {
            nodes: w.nodes,
            edges: w.edges,
            seed: w.seed,
            reference_features: w.reference_features,
        }
    }
}

impl GraphWorld {
    /// Builds a world from explicit parts, validating the graph invariants.
    pub fn from_parts(nodes: Vec<Node>, mut edges: Vec<Edge>, seed: u64) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(Error::InvalidParameter("a world needs at least two nodes".into()));
        }
        let dim = nodes[0].features.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::InvalidParameter(format!("node {i} has id {}", node.id)));
            }
            if node.features.len() != dim {
                return Err(Error::InvalidParameter(format!("node {i} feature dimension differs")));
            }
        }
        for e in edges.iter_mut() {
            if e.u >= n || e.v >= n || e.u == e.v {
                return Err(Error::InvalidParameter(format!("bad edge ({}, {})", e.u, e.v)));
            }
            if !(e.length > 0.0 && e.length.is_finite()) {
                return Err(Error::InvalidParameter(format!("edge ({}, {}) has length {}", e.u, e.v, e.length)));
            }
            if e.u > e.v {
                std::mem::swap(&mut e.u, &mut e.v);
            }
        }
        edges.sort_by(|a, b| (a.u, a.v).cmp(&(b.u, b.v)));
        if edges.windows(2).any(|w| (w[0].u, w[0].v) == (w[1].u, w[1].v)) {
            return Err(Error::InvalidParameter("duplicate edge".into()));
        }
        let adjacency = build_adjacency(n, &edges);
        if !is_connected(&adjacency) {
            return Err(Error::InvalidParameter("graph is not connected".into()));
        }
        Ok(Self {
            nodes,
            edges,
            seed,
            reference_features: None,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[0].features.len()
    }

    pub fn features(&self, node: NodeId) -> &[f64] {
        &self.nodes[node].features
    }

    /// Features as instructions describe them.
    pub fn reference_features(&self, node: NodeId) -> &[f64] {
        match &self.reference_features {
            Some(r) => &r[node],
            None => &self.nodes[node].features,
        }
    }

    pub fn position(&self, node: NodeId) -> [f64; 2] {
        self.nodes[node].position
    }

    /// Neighbors of `node` with edge lengths, ascending by id.
    pub fn neighbors(&self, node: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[node]
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adjacency[a].iter().find(|(n, _)| *n == b).map(|&(_, l)| l)
    }

    /// Single-source shortest path distances (Dijkstra).
    pub fn distances_from(&self, source: NodeId) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: source });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(next, len) in &self.adjacency[node] {
                let nd = d + len;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(HeapItem { dist: nd, node: next });
                }
            }
        }
        dist
    }

    /// Shortest path from `a` to `b`, inclusive of both ends. Ties go to the
    /// lower node id.
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Vec<NodeId> {
        let to_goal = self.distances_from(b);
        let mut path = vec![a];
        let mut cur = a;
        while cur != b {
            cur = self.next_hop(cur, &to_goal);
            path.push(cur);
        }
        path
    }

    /// First node on a shortest path from `node` given distances to the goal.
    pub fn next_hop(&self, node: NodeId, dist_to_goal: &[f64]) -> NodeId {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for &(next, len) in &self.adjacency[node] {
            let d = len + dist_to_goal[next];
            if d < best_d - 1e-12 {
                best_d = d;
                best = Some(next);
            }
        }
        best.expect("every node has at least one neighbor")
    }

    /// Observation at `node` for step `step_index`.
    pub fn observe(&self, node: NodeId, step_index: usize) -> Observation {
        let mut candidates = Vec::with_capacity(self.adjacency[node].len() + 1);
        candidates.push(Candidate {
            target: None,
            features: self.nodes[node].features.clone(),
            edge_length: 0.0,
        });
        for &(next, len) in &self.adjacency[node] {
            candidates.push(Candidate {
                target: Some(next),
                features: self.nodes[next].features.clone(),
                edge_length: len,
            });
        }
        Observation {
            current: node,
            candidates,
            step_index,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn build_adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<(NodeId, f64)>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.u].push((e.v, e.length));
        adj[e.v].push((e.u, e.length));
    }
    for list in adj.iter_mut() {
        list.sort_by_key(|&(id, _)| id);
    }
    adj
}

fn is_connected(adj: &[Vec<(NodeId, f64)>]) -> bool {
    if adj.is_empty() {
        return true;
    }
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == adj.len()
}

/// Bridges of the graph as `(min, max)` pairs, via Tarjan low-links.
fn bridges(adj: &[Vec<(NodeId, f64)>]) -> Vec<(NodeId, NodeId)> {
    let n = adj.len();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut out = Vec::new();
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (node, parent, next neighbor index)
        let mut stack: Vec<(NodeId, usize, usize)> = vec![(root, usize::MAX, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (u, parent, ref mut idx)) = stack.last_mut() {
            if *idx < adj[u].len() {
                let v = adj[u][*idx].0;
                *idx += 1;
                if v == parent {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = timer;
                    low[v] = timer;
                    timer += 1;
                    stack.push((v, u, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        out.push((p.min(u), p.max(u)));
                    }
                }
            }
        }
    }
    out
}

/// Fixed random Fourier basis shared by all worlds of one feature dimension.
#[derive(Debug, Clone)]
pub struct FeatureBasis {
    frequencies: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl FeatureBasis {
    pub fn standard(feature_dim: usize) -> Self {
        let mut rng = rng::stream(BASIS_SEED, "feature_basis", feature_dim as u64);
        let mut frequencies = Vec::with_capacity(feature_dim);
        let mut phases = Vec::with_capacity(feature_dim);
        for _ in 0..feature_dim {
            let wx: f64 = rng.sample(StandardNormal);
            let wy: f64 = rng.sample(StandardNormal);
            frequencies.push([wx / CODE_LENGTH_SCALE, wy / CODE_LENGTH_SCALE]);
            phases.push(rng.gen_range(0.0..2.0 * PI));
        }
        Self { frequencies, phases }
    }

    /// Positional code of a point: unit-variance cosine features.
    pub fn code(&self, p: [f64; 2]) -> Vec<f64> {
        self.frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| 2f64.sqrt() * (w[0] * p[0] + w[1] * p[1] + b).cos())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub n_nodes: usize,
    pub feature_dim: usize,
    pub connectivity: f64,
    /// Standard deviation of the per-node noise added to the positional code.
    pub feature_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_nodes: 40,
            feature_dim: 16,
            connectivity: 0.16,
            feature_noise: 0.05,
        }
    }
}

/// Generates a connected random geometric graph with the default feature
/// noise.
pub fn generate_world(seed: u64, n_nodes: usize, feature_dim: usize, connectivity: f64) -> Result<GraphWorld> {
    let params = WorldParams {
        n_nodes,
        feature_dim,
        connectivity,
        ..WorldParams::default()
    };
    generate_world_with(&params, seed)
}

pub fn generate_world_with(params: &WorldParams, seed: u64) -> Result<GraphWorld> {
    if params.n_nodes < 4 {
        return Err(Error::InvalidParameter(format!("n_nodes must be >= 4, got {}", params.n_nodes)));
    }
    if !(params.connectivity > 0.0 && params.connectivity <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "connectivity must lie in (0, 1], got {}",
            params.connectivity
        )));
    }
    if params.feature_dim == 0 {
        return Err(Error::InvalidParameter("feature_dim must be positive".into()));
    }
    if !(params.feature_noise >= 0.0 && params.feature_noise.is_finite()) {
        return Err(Error::InvalidParameter("feature_noise must be finite and >= 0".into()));
    }
    let radius = params.connectivity * WORLD_EXTENT * 2f64.sqrt();
    let basis = FeatureBasis::standard(params.feature_dim);
    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = rng::stream(seed, "world_layout", attempt as u64);
        let positions: Vec<[f64; 2]> = (0..params.n_nodes)
            .map(|_| [rng.gen_range(0.0..WORLD_EXTENT), rng.gen_range(0.0..WORLD_EXTENT)])
            .collect();
        let mut edges = Vec::new();
        for u in 0..params.n_nodes {
            for v in (u + 1)..params.n_nodes {
                let d = euclid(positions[u], positions[v]);
                if d < radius && d > 0.0 {
                    edges.push(Edge { u, v, length: d });
                }
            }
        }
        let adjacency = build_adjacency(params.n_nodes, &edges);
        if !is_connected(&adjacency) {
            continue;
        }
        let mut noise_rng = rng::stream(seed, "world_features", attempt as u64);
        let nodes = positions
            .iter()
            .enumerate()
            .map(|(id, &p)| {
                let mut features = basis.code(p);
                if params.feature_noise > 0.0 {
                    for f in features.iter_mut() {
                        let z: f64 = noise_rng.sample(StandardNormal);
                        *f += params.feature_noise * z;
                    }
                }
                Node {
                    id,
                    position: p,
                    features,
                }
            })
            .collect();
        return Ok(GraphWorld {
            nodes,
            edges,
            seed,
            reference_features: None,
            adjacency,
        });
    }
    Err(Error::Generation(format!(
        "no connected graph with n={} connectivity={} after {} attempts",
        params.n_nodes, params.connectivity, GENERATION_ATTEMPTS
    )))
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftParams {
    pub feature_noise_std: f64,
    pub edge_dropout: f64,
    /// Strength of the systematic appearance drift; see
    /// [`DriftMap`].
    pub feature_drift: f64,
    /// Probability that a node's observed features are blanked to zero.
    pub occlusion: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            feature_noise_std: 0.1,
            edge_dropout: 0.1,
            feature_drift: 0.5,
            occlusion: 0.0,
        }
    }
}

/// Fixed appearance offset: a drift of strength `a` adds `a u` to every
/// observed feature vector, identically in every shifted world, while
/// instructions keep describing the unshifted appearance.
#[derive(Debug, Clone)]
pub struct DriftMap {
    offset: Vec<f64>,
}

impl DriftMap {
    pub fn standard(feature_dim: usize) -> Self {
        let mut rng = rng::stream(BASIS_SEED, "feature_drift", feature_dim as u64);
        Self {
            offset: (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], strength: f64) -> Vec<f64> {
        x.iter().zip(&self.offset).map(|(xi, u)| xi + strength * u).collect()
    }
}

/// Shifts a world's appearance and layout: a fixed feature drift, seeded
/// Gaussian noise, seeded occlusion, then dropout of a seeded subset of
/// non-bridge edges, retrying until the graph stays connected. When drift
/// or occlusion is applied the clean features are kept as the reference
/// that instructions are written from.
pub fn apply_shift(world: &GraphWorld, shift: &ShiftParams, seed: u64) -> Result<GraphWorld> {
    if !(shift.feature_noise_std >= 0.0 && shift.feature_noise_std.is_finite()) {
        return Err(Error::InvalidParameter("feature_noise_std must be finite and >= 0".into()));
    }
    if !(0.0..1.0).contains(&shift.edge_dropout) {
        return Err(Error::InvalidParameter(format!(
            "edge_dropout must lie in [0, 1), got {}",
            shift.edge_dropout
        )));
    }
    if !(shift.feature_drift >= 0.0 && shift.feature_drift.is_finite()) {
        return Err(Error::InvalidParameter("feature_drift must be finite and >= 0".into()));
    }
    if !(0.0..=1.0).contains(&shift.occlusion) {
        return Err(Error::InvalidParameter(format!("occlusion must lie in [0, 1], got {}", shift.occlusion)));
    }
    let mut nodes = world.nodes.clone();
    let mut reference_features = world.reference_features.clone();
    if (shift.feature_drift > 0.0 || shift.occlusion > 0.0) && reference_features.is_none() {
        reference_features = Some(nodes.iter().map(|n| n.features.clone()).collect());
    }
    if shift.feature_drift > 0.0 {
        let drift = DriftMap::standard(world.feature_dim());
        for node in nodes.iter_mut() {
            node.features = drift.apply(&node.features, shift.feature_drift);
        }
    }
    if shift.feature_noise_std > 0.0 {
        let mut rng = rng::stream(seed, "shift_features", 0);
        for node in nodes.iter_mut() {
            for f in node.features.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *f += shift.feature_noise_std * z;
            }
        }
    }
    if shift.occlusion > 0.0 {
        let mut rng = rng::stream(seed, "shift_occlusion", 0);
        for node in nodes.iter_mut() {
            if rng.gen::<f64>() < shift.occlusion {
                node.features.iter_mut().for_each(|f| *f = 0.0);
            }
        }
    }
    let mut edges = world.edges.clone();
    if shift.edge_dropout > 0.0 {
        let bridge_set = bridges(&world.adjacency);
        let mut accepted = None;
        for attempt in 0..SHIFT_ATTEMPTS {
            let mut rng = rng::stream(seed, "shift_edges", attempt as u64);
            let kept: Vec<Edge> = world
                .edges
                .iter()
                .filter(|e| {
                    let drop = rng.gen::<f64>() < shift.edge_dropout;
                    !drop || bridge_set.contains(&(e.u, e.v))
                })
                .copied()
                .collect();
            if is_connected(&build_adjacency(nodes.len(), &kept)) {
                accepted = Some(kept);
                break;
            }
        }
        edges = accepted.ok_or(Error::Disconnected {
            attempts: SHIFT_ATTEMPTS,
        })?;
    }
    let adjacency = build_adjacency(nodes.len(), &edges);
    Ok(GraphWorld {
        nodes,
        edges,
        seed: world.seed,
        reference_features,
        adjacency,
    })
}

/// Shortest weighted path length between two nodes.
pub fn geodesic(world: &GraphWorld, a: NodeId, b: NodeId) -> f64 {
    if a == b {
        return 0.0;
    }
    world.distances_from(a)[b]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub start: NodeId,
    pub goal: NodeId,
    pub instruction: Vec<f64>,
    pub success_radius: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub success_radius: f64,
    pub max_steps: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            success_radius: 3.0,
            max_steps: 20,
        }
    }
}

/// Weight of the goal features in the instruction; the remainder goes to
/// the mean of two landmark nodes on the shortest path.
pub const INSTRUCTION_GOAL_WEIGHT: f64 = 0.75;

/// Samples a non-trivial navigation task on `world`.
pub fn sample_task(world: &GraphWorld, params: &TaskParams, seed: u64) -> Result<Task> {
    if !(params.success_radius >= 0.0) || params.max_steps == 0 {
        return Err(Error::InvalidParameter("bad task parameters".into()));
    }
    let mut rng = rng::stream(seed, "task", 0);
    let n = world.len();
    for _ in 0..TASK_ATTEMPTS {
        let goal = rng.gen_range(0..n);
        let start = rng.gen_range(0..n);
        if start == goal {
            continue;
        }
        let to_goal = world.distances_from(goal);
        if to_goal[start] <= params.success_radius {
            continue;
        }
        let path = world.shortest_path(start, goal);
        let interior = &path[1..path.len() - 1];
        let landmarks: Vec<NodeId> = if interior.is_empty() {
            vec![goal, goal]
        } else {
            (0..2).map(|_| *interior.choose(&mut rng).expect("non-empty")).collect()
        };
        let instruction = instruction_from(world, goal, &landmarks);
        return Ok(Task {
            start,
            goal,
            instruction,
            success_radius: params.success_radius,
            max_steps: params.max_steps,
        });
    }
    Err(Error::Generation(format!(
        "no task farther than {} m found",
        params.success_radius
    )))
}

fn instruction_from(world: &GraphWorld, goal: NodeId, landmarks: &[NodeId]) -> Vec<f64> {
    let dim = world.feature_dim();
    let mut out = vec![0.0; dim];
    let lw = (1.0 - INSTRUCTION_GOAL_WEIGHT) / landmarks.len() as f64;
    for (j, o) in out.iter_mut().enumerate() {
        *o = INSTRUCTION_GOAL_WEIGHT * world.reference_features(goal)[j]
            + landmarks.iter().map(|&l| lw * world.reference_features(l)[j]).sum::<f64>();
    }
    out
}

/// True iff the agent ended within the success radius of the goal.
pub fn is_success(world: &GraphWorld, final_node: NodeId, task: &Task) -> bool {
    geodesic(world, final_node, task.goal) <= task.success_radius
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// `None` for STOP.
    pub target: Option<NodeId>,
    pub features: Vec<f64>,
    pub edge_length: f64,
}

impl Candidate {
    pub fn is_stop(&self) -> bool {
        self.target.is_none()
    }
}

/// What the agent sees at one step. Index 0 is always STOP; the remaining
/// candidates are neighbors in ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub current: NodeId,
    pub candidates: Vec<Candidate>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Continue(Observation),
    Terminal { node: NodeId, truncated: bool },
}

/// Advances one step. STOP ends the episode at the current node; a move on
/// the last allowed step is taken and then truncated.
///
/// Panics if `action` does not index `obs.candidates`.
pub fn step(world: &GraphWorld, task: &Task, obs: &Observation, action: usize) -> StepResult {
    assert!(
        action < obs.candidates.len(),
        "action {action} out of range for {} candidates",
        obs.candidates.len()
    );
    match obs.candidates[action].target {
        None => StepResult::Terminal {
            node: obs.current,
            truncated: false,
        },
        Some(next) => {
            let t = obs.step_index + 1;
            if t >= task.max_steps {
                StepResult::Terminal {
                    node: next,
                    truncated: true,
                }
            } else {
                StepResult::Continue(world.observe(next, t))
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod test_graphs {
    use super::*;

    /// Unit-length path or cycle with constant features.
    pub fn ring(n: usize, closed: bool) -> GraphWorld {
        let nodes = (0..n)
            .map(|id| Node {
                id,
                position: [id as f64, 0.0],
                features: vec![id as f64, 1.0],
            })
            .collect();
        let mut edges: Vec<Edge> = (0..n - 1).map(|u| Edge { u, v: u + 1, length: 1.0 }).collect();
        if closed {
            edges.push(Edge { u: 0, v: n - 1, length: 1.0 });
        }
        GraphWorld::from_parts(nodes, edges, 0).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_graphs::ring;
    use super::*;

    fn task(start: NodeId, goal: NodeId, radius: f64, max_steps: usize) -> Task {
        Task {
            start,
            goal,
            instruction: vec![0.0, 0.0],
            success_radius: radius,
            max_steps,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(7, 4, 8, 1.0).unwrap();
        let b = generate_world(7, 4, 8, 1.0).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn different_seeds_give_different_worlds() {
        let a = generate_world(7, 4, 8, 1.0).unwrap();
        let b = generate_world(8, 4, 8, 1.0).unwrap();
        assert_ne!(a.to_json(), b.to_json());
        let a = generate_world(7, 40, 8, 0.16).unwrap();
        let b = generate_world(8, 40, 8, 0.16).unwrap();
        let ea: Vec<_> = a.edges().iter().map(|e| (e.u, e.v)).collect();
        let eb: Vec<_> = b.edges().iter().map(|e| (e.u, e.v)).collect();
        assert_ne!(ea, eb);
    }

    #[test]
    fn generated_worlds_are_connected() {
        for seed in 0..20 {
            let w = generate_world(seed, 40, 8, 0.16).unwrap();
            assert!(is_connected(&w.adjacency));
            assert!((0..w.len()).all(|n| !w.neighbors(n).is_empty()));
        }
    }

    #[test]
    fn generation_rejects_bad_parameters() {
        assert!(generate_world(0, 3, 8, 1.0).is_err());
        assert!(generate_world(0, 10, 8, 0.0).is_err());
        assert!(generate_world(0, 10, 8, 1.5).is_err());
        assert!(matches!(generate_world(0, 50, 8, 0.01), Err(Error::Generation(_))));
    }

    #[test]
    fn json_round_trip() {
        let w = generate_world(3, 12, 4, 0.4).unwrap();
        let back: GraphWorld = serde_json::from_str(&w.to_json()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.neighbors(0), w.neighbors(0));
    }

    fn noise_dropout(feature_noise_std: f64, edge_dropout: f64) -> ShiftParams {
        ShiftParams { feature_noise_std, edge_dropout, feature_drift: 0.0, occlusion: 0.0 }
    }

    #[test]
    fn drift_is_a_shared_offset_and_keeps_the_reference() {
        let w = generate_world(5, 30, 8, 0.2).unwrap();
        let p = ShiftParams { feature_noise_std: 0.0, edge_dropout: 0.0, feature_drift: 0.5, occlusion: 0.0 };
        let a = apply_shift(&w, &p, 1).unwrap();
        let b = apply_shift(&w, &p, 2).unwrap();
        // Same offset on every node and in every world, whatever the seed.
        let delta = |s: &GraphWorld, i: NodeId| -> Vec<f64> { s.features(i).iter().zip(w.features(i)).map(|(x, y)| x - y).collect() };
        assert_eq!(delta(&a, 0), delta(&b, 0));
        for i in 1..w.len() {
            for (x, y) in delta(&a, i).iter().zip(delta(&a, 0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(delta(&a, 0).iter().any(|d| d.abs() > 1e-3));
        for i in 0..w.len() {
            assert_eq!(a.reference_features(i), w.features(i));
        }
        assert_eq!(w.reference_features(3), w.features(3));
        let back: GraphWorld = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
        // Shifting again keeps the original reference.
        let twice = apply_shift(&a, &p, 3).unwrap();
        assert_eq!(twice.reference_features(4), w.features(4));
    }

    #[test]
    fn occlusion_blanks_features() {
        let w = generate_world(5, 30, 8, 0.2).unwrap();
        let all = ShiftParams { feature_noise_std: 0.0, edge_dropout: 0.0, feature_drift: 0.0, occlusion: 1.0 };
        let s = apply_shift(&w, &all, 1).unwrap();
        assert!((0..w.len()).all(|i| s.features(i).iter().all(|f| *f == 0.0)));
        assert_eq!(s.reference_features(2), w.features(2));
        let some = ShiftParams { occlusion: 0.5, ..all };
        let s = apply_shift(&w, &some, 1).unwrap();
        let blank = (0..w.len()).filter(|&i| s.features(i).iter().all(|f| *f == 0.0)).count();
        assert!(blank > 0 && blank < w.len());
        assert!(apply_shift(&w, &ShiftParams { occlusion: 1.5, ..all }, 1).is_err());
        assert!(apply_shift(&w, &ShiftParams { feature_drift: -0.1, ..all }, 1).is_err());
    }

    #[test]
    fn identity_shift_returns_input() {
        let w = generate_world(5, 30, 8, 0.2).unwrap();
        let s = apply_shift(&w, &noise_dropout(0.0, 0.0), 99).unwrap();
        assert_eq!(s.to_json(), w.to_json());
    }

    #[test]
    fn shift_is_deterministic() {
        let w = generate_world(5, 30, 8, 0.2).unwrap();
        let p = noise_dropout(0.5, 0.0);
        let a = apply_shift(&w, &p, 1).unwrap();
        let b = apply_shift(&w, &p, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a.to_json(), w.to_json());
    }

    #[test]
    fn dropout_on_cycle_removes_at_most_one_edge() {
        let cycle = ring(6, true);
        // All subsets of removed edges that keep the 6-cycle connected.
        let mut connected_subsets = Vec::new();
        for mask in 0u32..64 {
            let kept: Vec<Edge> = cycle
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) == 0)
                .map(|(_, e)| *e)
                .collect();
            if is_connected(&build_adjacency(6, &kept)) {
                connected_subsets.push(mask.count_ones());
            }
        }
        assert_eq!(connected_subsets.iter().copied().max(), Some(1));
        for seed in 0..50 {
            let s = apply_shift(&cycle, &noise_dropout(0.0, 0.3), seed).unwrap();
            assert!(cycle.edges().len() - s.edges().len() <= 1);
            assert!(is_connected(&s.adjacency));
        }
    }

    #[test]
    fn dropout_never_removes_bridges() {
        let path = ring(5, false);
        let s = apply_shift(&path, &noise_dropout(0.0, 0.9), 3).unwrap();
        assert_eq!(s.edges(), path.edges());
    }

    #[test]
    fn bridges_found() {
        let path = ring(4, false);
        assert_eq!(bridges(&path.adjacency), vec![(2, 3), (1, 2), (0, 1)]);
        assert!(bridges(&ring(5, true).adjacency).is_empty());
    }

    #[test]
    fn geodesic_basics() {
        let path = ring(3, false);
        assert_eq!(geodesic(&path, 0, 2), 2.0);
        assert_eq!(geodesic(&path, 1, 1), 0.0);
        assert_eq!(path.shortest_path(0, 2), vec![0, 1, 2]);
    }

    fn bellman_ford(world: &GraphWorld, source: NodeId) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; world.len()];
        dist[source] = 0.0;
        for _ in 0..world.len() {
            for e in world.edges() {
                if dist[e.u] + e.length < dist[e.v] {
                    dist[e.v] = dist[e.u] + e.length;
                }
                if dist[e.v] + e.length < dist[e.u] {
                    dist[e.u] = dist[e.v] + e.length;
                }
            }
        }
        dist
    }

    #[test]
    fn geodesic_matches_bellman_ford() {
        for seed in 0..10 {
            let w = generate_world(seed, 30, 4, 0.2).unwrap();
            let mut rng = rng::stream(seed, "pairs", 0);
            for _ in 0..10 {
                let a = rng.gen_range(0..w.len());
                let b = rng.gen_range(0..w.len());
                let oracle = bellman_ford(&w, a)[b];
                assert!((geodesic(&w, a, b) - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn success_boundary_is_inclusive() {
        let path = ring(4, false);
        assert!(is_success(&path, 3, &task(0, 3, 3.0, 20)));
        assert!(is_success(&path, 1, &task(0, 3, 2.0, 20)));
        assert!(!is_success(&path, 1, &task(0, 3, 2.0 - 1e-9, 20)));
    }

    #[test]
    fn observation_layout() {
        let w = ring(5, true);
        let obs = w.observe(0, 0);
        assert!(obs.candidates[0].is_stop());
        let targets: Vec<_> = obs.candidates[1..].iter().map(|c| c.target.unwrap()).collect();
        assert_eq!(targets, vec![1, 4]);
    }

    #[test]
    fn step_semantics() {
        let w = ring(5, false);
        let t = task(0, 4, 0.5, 3);
        let obs = w.observe(1, 0);
        assert_eq!(step(&w, &t, &obs, 0), StepResult::Terminal { node: 1, truncated: false });
        match step(&w, &t, &obs, 2) {
            StepResult::Continue(o) => {
                assert_eq!(o.current, 2);
                assert_eq!(o.step_index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let late = w.observe(1, 2);
        assert_eq!(step(&w, &t, &late, 2), StepResult::Terminal { node: 2, truncated: true });
    }

    #[test]
    #[should_panic]
    fn step_rejects_out_of_range_action() {
        let w = ring(4, false);
        let obs = w.observe(0, 0);
        step(&w, &task(0, 3, 0.5, 5), &obs, 5);
    }

    #[test]
    fn sampled_tasks_are_nontrivial_and_deterministic() {
        let w = generate_world(11, 40, 8, 0.16).unwrap();
        for s in 0..30 {
            let t = sample_task(&w, &TaskParams::default(), s).unwrap();
            assert_ne!(t.start, t.goal);
            assert!(geodesic(&w, t.start, t.goal) > t.success_radius);
            assert_eq!(t, sample_task(&w, &TaskParams::default(), s).unwrap());
        }
    }
}

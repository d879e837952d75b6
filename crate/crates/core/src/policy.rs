//! Navigation policy: a one-layer tanh state encoder and a bilinear action
//! scorer, with a hand-written backward pass.
//!
//! ```text
//! s_t      = tanh(W_enc [I; x_cur; 1] + b_enc + W_hist h_t)
//! logit_k  = s_t . W_act [x_k; len_k / 10; stop_k]
//! ```
//!
//! `h_t` is the running mean of the features of previously visited nodes and
//! is treated as a constant input by the backward pass. STOP is scored with
//! the current node's features, zero length and `stop_k = 1`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envgraph::{self, GraphWorld, NodeId, Observation, StepResult, Task};
use crate::error::{Error, Result};
use crate::rng;

/// Edge lengths enter the scorer in units of this many meters.
pub const LENGTH_UNIT: f64 = 10.0;
pub const INIT_SCALE: f64 = 0.1;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub hidden: usize,
    pub feature: usize,
}

impl PolicyDims {
    pub fn new(hidden: usize, feature: usize) -> Self {
        Self { hidden, feature }
    }

    pub fn encoder_input(&self) -> usize {
        2 * self.feature + 1
    }

    pub fn scorer_input(&self) -> usize {
        self.feature + 2
    }

    fn w_enc_len(&self) -> usize {
        self.hidden * self.encoder_input()
    }

    fn w_hist_len(&self) -> usize {
        self.hidden * self.feature
    }

    fn w_act_len(&self) -> usize {
        self.hidden * self.scorer_input()
    }

    pub fn param_count(&self) -> usize {
        self.w_enc_len() + self.hidden + self.w_hist_len() + self.w_act_len()
    }

    // Offsets into the flat parameter vector.
    fn b_enc_at(&self) -> usize {
        self.w_enc_len()
    }

    fn w_hist_at(&self) -> usize {
        self.b_enc_at() + self.hidden
    }

    fn w_act_at(&self) -> usize {
        self.w_hist_at() + self.w_hist_len()
    }
}

/// Policy parameters as one flat vector: `W_enc` (row-major D x (2F+1)),
/// `b_enc`, `W_hist` (D x F), `W_act` (D x (F+2)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    dims: PolicyDims,
    data: Vec<f64>,
}

macro_rules! param_views {
    ($t:ty) => {
        impl $t {
            pub fn dims(&self) -> PolicyDims {
                self.dims
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn w_enc(&self) -> &[f64] {
                &self.data[..self.dims.b_enc_at()]
            }

            pub fn b_enc(&self) -> &[f64] {
                &self.data[self.dims.b_enc_at()..self.dims.w_hist_at()]
            }

            pub fn w_hist(&self) -> &[f64] {
                &self.data[self.dims.w_hist_at()..self.dims.w_act_at()]
            }

            pub fn w_act(&self) -> &[f64] {
                &self.data[self.dims.w_act_at()..]
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|x| x.is_finite())
            }
        }
    };
}

param_views!(PolicyParams);
param_views!(ParamGradient);

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Seeded uniform initialization in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init(dims: PolicyDims, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "policy_init", 0);
        let data = (0..dims.param_count())
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Self { dims, data }
    }

    pub fn from_vec(dims: PolicyDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// `self -= step * grad`, then checks finiteness.
    pub fn descend(&mut self, grad: &ParamGradient, step: f64) {
        assert_eq!(self.dims, grad.dims, "gradient shape mismatch");
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= step * g;
        }
        assert!(self.is_finite(), "policy parameters became non-finite");
    }

    /// Bit-level hash used to detect caches from a different parameter set.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn write_checkpoint<W: Write>(&self, seed: u64, mut out: W) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            hidden_dim: self.dims.hidden,
            feature_dim: self.dims.feature,
            seed,
            len: self.data.len(),
        };
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let line = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.write_all(line.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
        for x in &self.data {
            out.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, CheckpointHeader)> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema_version {}", header.schema_version)));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.len * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of parameters, found {}",
                header.len * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let params = Self::from_vec(PolicyDims::new(header.hidden_dim, header.feature_dim), data)?;
        Ok((params, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub len: usize,
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    dims: PolicyDims,
    data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(dims: PolicyDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Hidden state `s_t` plus the inputs the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub s: Vec<f64>,
    input: Vec<f64>,
    history: Vec<f64>,
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub state: HiddenState,
    scorer_inputs: Vec<Vec<f64>>,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    /// A distribution given directly by probabilities (no logits).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let logits = probs.iter().map(|p| p.ln()).collect();
        Self { logits, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn encoder_input(instruction: &[f64], current: &[f64]) -> Vec<f64> {
    let mut u = Vec::with_capacity(instruction.len() + current.len() + 1);
    u.extend_from_slice(instruction);
    u.extend_from_slice(current);
    u.push(1.0);
    u
}

fn scorer_input(c: &envgraph::Candidate) -> Vec<f64> {
    let mut v = Vec::with_capacity(c.features.len() + 2);
    v.extend_from_slice(&c.features);
    v.push(c.edge_length / LENGTH_UNIT);
    v.push(if c.is_stop() { 1.0 } else { 0.0 });
    v
}

fn matvec(m: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Computes the hidden state for one step.
///
/// Panics on dimension mismatch.
pub fn encode(params: &PolicyParams, instruction: &[f64], obs: &Observation, history_mean: &[f64]) -> HiddenState {
    let dims = params.dims;
    let current = &obs.candidates[0].features;
    assert_eq!(instruction.len(), dims.feature, "instruction dimension");
    assert_eq!(current.len(), dims.feature, "feature dimension");
    assert_eq!(history_mean.len(), dims.feature, "history dimension");
    let input = encoder_input(instruction, current);
    let pre_enc = matvec(params.w_enc(), dims.hidden, &input);
    let pre_hist = matvec(params.w_hist(), dims.hidden, history_mean);
    let s = pre_enc
        .iter()
        .zip(params.b_enc())
        .zip(&pre_hist)
        .map(|((a, b), h)| (a + b + h).tanh())
        .collect();
    HiddenState {
        s,
        input,
        history: history_mean.to_vec(),
    }
}

/// Scores every candidate and normalizes with softmax.
pub fn action_distribution(params: &PolicyParams, state: &HiddenState, obs: &Observation) -> ActionDistribution {
    let inputs: Vec<Vec<f64>> = obs.candidates.iter().map(scorer_input).collect();
    ActionDistribution::from_logits(score(params, &state.s, &inputs))
}

fn score(params: &PolicyParams, s: &[f64], inputs: &[Vec<f64>]) -> Vec<f64> {
    let dims = params.dims;
    inputs
        .iter()
        .map(|v| {
            let wv = matvec(params.w_act(), dims.hidden, v);
            s.iter().zip(&wv).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Forward pass for one step, keeping the cache for [`backward`].
pub fn forward_step(
    params: &PolicyParams,
    instruction: &[f64],
    obs: &Observation,
    history_mean: &[f64],
) -> (StepCache, ActionDistribution) {
    let state = encode(params, instruction, obs, history_mean);
    let scorer_inputs: Vec<Vec<f64>> = obs.candidates.iter().map(scorer_input).collect();
    let dist = ActionDistribution::from_logits(score(params, &state.s, &scorer_inputs));
    (
        StepCache {
            state,
            scorer_inputs,
            fingerprint: params.fingerprint(),
        },
        dist,
    )
}

/// Argmax with ties going to the lowest index.
pub fn select_action(dist: &ActionDistribution) -> usize {
    let mut best = 0;
    for (i, &p) in dist.probs.iter().enumerate().skip(1) {
        if p > dist.probs[best] {
            best = i;
        }
    }
    best
}

/// Gradient of `sum_t (d_logits[t] . logits_t + d_states[t] . s_t)` with
/// respect to the parameters.
///
/// Panics if the caches were produced by a different parameter set.
pub fn backward(
    params: &PolicyParams,
    caches: &[StepCache],
    d_logits: &[Vec<f64>],
    d_states: Option<&[Vec<f64>]>,
) -> ParamGradient {
    assert_eq!(caches.len(), d_logits.len(), "one logit gradient per step");
    if let Some(ds) = d_states {
        assert_eq!(ds.len(), caches.len(), "one state gradient per step");
    }
    let fp = params.fingerprint();
    let dims = params.dims;
    let (d, ein, sin, f) = (dims.hidden, dims.encoder_input(), dims.scorer_input(), dims.feature);
    let mut grad = ParamGradient::zeros(dims);
    let (w_enc_at, b_at, w_hist_at, w_act_at) = (0, dims.b_enc_at(), dims.w_hist_at(), dims.w_act_at());
    let w_act = params.w_act();
    for (t, (cache, dl)) in caches.iter().zip(d_logits).enumerate() {
        assert_eq!(cache.fingerprint, fp, "stale step cache: parameters changed since the forward pass");
        assert_eq!(dl.len(), cache.scorer_inputs.len(), "logit gradient length");
        let s = &cache.state.s;
        let mut ds = match d_states {
            Some(states) => states[t].clone(),
            None => vec![0.0; d],
        };
        for (v, &g) in cache.scorer_inputs.iter().zip(dl) {
            if g == 0.0 {
                continue;
            }
            for r in 0..d {
                let row = &w_act[r * sin..(r + 1) * sin];
                let gw = &mut grad.data[w_act_at + r * sin..w_act_at + (r + 1) * sin];
                let mut wv = 0.0;
                for c in 0..sin {
                    gw[c] += g * s[r] * v[c];
                    wv += row[c] * v[c];
                }
                ds[r] += g * wv;
            }
        }
        for r in 0..d {
            let dh = ds[r] * (1.0 - s[r] * s[r]);
            if dh == 0.0 {
                continue;
            }
            grad.data[b_at + r] += dh;
            let ge = &mut grad.data[w_enc_at + r * ein..w_enc_at + (r + 1) * ein];
            for (g, u) in ge.iter_mut().zip(&cache.state.input) {
                *g += dh * u;
            }
            let gh = &mut grad.data[w_hist_at + r * f..w_hist_at + (r + 1) * f];
            for (g, h) in gh.iter_mut().zip(&cache.state.history) {
                *g += dh * h;
            }
        }
    }
    grad
}

/// One recorded step of a greedy rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub node: NodeId,
    pub observation: Observation,
    pub history_mean: Vec<f64>,
    pub cache: StepCache,
    pub dist: ActionDistribution,
    pub selected: usize,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub final_node: NodeId,
    pub truncated: bool,
}

impl Rollout {
    /// Visited nodes in order, starting at the task start and ending at the
    /// final node.
    pub fn path(&self) -> Vec<NodeId> {
        let mut p: Vec<NodeId> = self.steps.iter().map(|s| s.node).collect();
        if p.last() != Some(&self.final_node) {
            p.push(self.final_node);
        }
        p
    }

    pub fn caches(&self) -> Vec<StepCache> {
        self.steps.iter().map(|s| s.cache.clone()).collect()
    }
}

/// Running mean of visited-node features.
#[derive(Debug, Clone)]
pub struct HistoryMean {
    sum: Vec<f64>,
    count: usize,
}

impl HistoryMean {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn push(&mut self, features: &[f64]) {
        for (s, f) in self.sum.iter_mut().zip(features) {
            *s += f;
        }
        self.count += 1;
    }

    pub fn mean(&self) -> Vec<f64> {
        if self.count == 0 {
            return self.sum.clone();
        }
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }
}

/// Greedy (argmax) rollout of the policy on a task.
pub fn rollout(params: &PolicyParams, world: &GraphWorld, task: &Task) -> Rollout {
    let mut obs = world.observe(task.start, 0);
    let mut history = HistoryMean::new(world.feature_dim());
    let mut steps = Vec::new();
    loop {
        let history_mean = history.mean();
        let (cache, dist) = forward_step(params, &task.instruction, &obs, &history_mean);
        let selected = select_action(&dist);
        let node = obs.current;
        let next = envgraph::step(world, task, &obs, selected);
        history.push(world.features(node));
        steps.push(RolloutStep {
            node,
            observation: obs,
            history_mean,
            cache,
            dist,
            selected,
        });
        match next {
            StepResult::Continue(o) => obs = o,
            StepResult::Terminal { node, truncated } => {
                return Rollout {
                    steps,
                    final_node: node,
                    truncated,
                }
            }
        }
    }
}

/// Recomputes the action distributions of a recorded rollout under new
/// parameters, holding observations and history fixed.
pub fn replay(params: &PolicyParams, instruction: &[f64], rollout: &Rollout) -> Vec<ActionDistribution> {
    rollout
        .steps
        .iter()
        .map(|s| forward_step(params, instruction, &s.observation, &s.history_mean).1)
        .collect()
}

/// One supervised step: the expert's action at an observation.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub instruction: Vec<f64>,
    pub observation: Observation,
    pub history_mean: Vec<f64>,
    pub expert_action: usize,
}

/// Follows the shortest path to the goal, stopping at the first node within
/// the success radius.
pub fn expert_demonstrations(world: &GraphWorld, task: &Task) -> Vec<Demonstration> {
    let to_goal = world.distances_from(task.goal);
    let mut out = Vec::new();
    let mut node = task.start;
    let mut history = HistoryMean::new(world.feature_dim());
    for t in 0..task.max_steps {
        let obs = world.observe(node, t);
        let expert_action = if to_goal[node] <= task.success_radius {
            0
        } else {
            let next = world.next_hop(node, &to_goal);
            obs.candidates
                .iter()
                .position(|c| c.target == Some(next))
                .expect("next hop is a neighbor")
        };
        out.push(Demonstration {
            instruction: task.instruction.clone(),
            observation: obs.clone(),
            history_mean: history.mean(),
            expert_action,
        });
        if expert_action == 0 {
            break;
        }
        history.push(world.features(node));
        node = obs.candidates[expert_action].target.expect("move");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Anneal the step size from `learning_rate` to zero on a half cosine.
    /// A constant step at this rate keeps oscillating late in training.
    pub cosine_decay: bool,
    pub tasks_per_world: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 48,
            epochs: 1200,
            learning_rate: 0.5,
            momentum: 0.9,
            cosine_decay: true,
            tasks_per_world: 150,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: PolicyParams,
    /// Mean cross-entropy before each epoch's update, plus the final value.
    pub loss_history: Vec<f64>,
}

/// Mean cross-entropy to the expert actions and its gradient.
pub fn bc_loss_and_gradient(params: &PolicyParams, demos: &[Demonstration]) -> (f64, ParamGradient) {
    let mut grad = ParamGradient::zeros(params.dims);
    let mut loss = 0.0;
    let n = demos.len().max(1) as f64;
    for demo in demos {
        let (cache, dist) = forward_step(params, &demo.instruction, &demo.observation, &demo.history_mean);
        loss -= dist.probs[demo.expert_action].max(f64::MIN_POSITIVE).ln();
        let dl: Vec<f64> = dist
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| (p - if k == demo.expert_action { 1.0 } else { 0.0 }) / n)
            .collect();
        grad.add_assign(&backward(params, std::slice::from_ref(&cache), &[dl], None));
    }
    (loss / n, grad)
}

/// Step size for `epoch` under the configured schedule.
pub fn bc_learning_rate(config: &PretrainConfig, epoch: usize) -> f64 {
    if !config.cosine_decay || config.epochs == 0 {
        return config.learning_rate;
    }
    let t = epoch as f64 / config.epochs as f64;
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Behavior cloning by full-batch gradient descent with heavy-ball momentum.
pub fn pretrain_bc(demos: &[Demonstration], dims: PolicyDims, config: &PretrainConfig, seed: u64) -> PretrainOutcome {
    let mut params = PolicyParams::init(dims, seed);
    let mut velocity = ParamGradient::zeros(dims);
    let mut loss_history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = bc_loss_and_gradient(&params, demos);
        loss_history.push(loss);
        velocity.scale(config.momentum);
        velocity.add_assign(&grad);
        params.descend(&velocity, bc_learning_rate(config, epoch));
    }
    loss_history.push(bc_loss_and_gradient(&params, demos).0);
    PretrainOutcome { params, loss_history }
}

/// Demonstrations for `tasks_per_world` seeded tasks on each world.
pub fn demonstrations_for(worlds: &[GraphWorld], task_params: &envgraph::TaskParams, tasks_per_world: usize, seed: u64) -> Result<Vec<Demonstration>> {
    let mut demos = Vec::new();
    for (w, world) in worlds.iter().enumerate() {
        for j in 0..tasks_per_world {
            let task = envgraph::sample_task(world, task_params, rng::derive_seed(seed, "bc_task", (w * 1_000_003 + j) as u64))?;
            demos.extend(expert_demonstrations(world, &task));
        }
    }
    Ok(demos)
}

/// Fraction of demonstrations where the policy's argmax equals the expert.
pub fn expert_agreement(params: &PolicyParams, demos: &[Demonstration]) -> f64 {
    if demos.is_empty() {
        return 0.0;
    }
    let hits = demos
        .iter()
        .filter(|d| {
            let (_, dist) = forward_step(params, &d.instruction, &d.observation, &d.history_mean);
            select_action(&dist) == d.expert_action
        })
        .count();
    hits as f64 / demos.len() as f64
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::envgraph::{generate_world, sample_task, TaskParams};

    /// A random world, task and policy with D = F = 4.
    pub fn random_case(seed: u64) -> (GraphWorld, Task, PolicyParams) {
        let world = generate_world(seed, 12, 4, 0.35).unwrap();
        let task = sample_task(&world, &TaskParams { success_radius: 3.0, max_steps: 6 }, seed).unwrap();
        let mut params = PolicyParams::init(PolicyDims::new(4, 4), seed);
        params.as_mut_slice().iter_mut().for_each(|x| *x *= 2.0);
        (world, task, params)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::random_case;
    use super::*;
    use crate::envgraph::{Candidate, Edge, Node};
    use proptest::prelude::*;
    use rand::Rng;

    fn obs_with(features: Vec<Vec<f64>>) -> Observation {
        Observation {
            current: 0,
            candidates: features
                .into_iter()
                .enumerate()
                .map(|(i, f)| Candidate {
                    target: if i == 0 { None } else { Some(i) },
                    features: f,
                    edge_length: if i == 0 { 0.0 } else { 1.0 },
                })
                .collect(),
            step_index: 0,
        }
    }

    #[test]
    fn zero_weights_give_tanh_of_bias() {
        let dims = PolicyDims::new(3, 2);
        let mut p = PolicyParams::zeros(dims);
        let b = [0.3, -1.2, 2.0];
        let at = dims.b_enc_at();
        p.as_mut_slice()[at..at + 3].copy_from_slice(&b);
        let obs = obs_with(vec![vec![0.0, 0.0]]);
        let h = encode(&p, &[0.0, 0.0], &obs, &[0.0, 0.0]);
        for (s, b) in h.s.iter().zip(b) {
            assert_eq!(*s, b.tanh());
        }
    }

    #[test]
    fn encode_matches_hand_computation() {
        // D = 2, F = 2. Input u = [I; x; 1] = [1, -1, 0.5, 2, 1].
        let dims = PolicyDims::new(2, 2);
        let w_enc = [0.1, 0.2, 0.3, 0.4, 0.5, -0.5, 0.4, -0.3, 0.2, -0.1];
        let b_enc = [0.05, -0.05];
        let w_hist = [1.0, 0.0, 0.0, 1.0];
        let mut data = Vec::new();
        data.extend_from_slice(&w_enc);
        data.extend_from_slice(&b_enc);
        data.extend_from_slice(&w_hist);
        data.extend_from_slice(&[0.0; 8]);
        let p = PolicyParams::from_vec(dims, data).unwrap();
        let obs = obs_with(vec![vec![0.5, 2.0]]);
        let h = encode(&p, &[1.0, -1.0], &obs, &[0.25, -0.5]);
        // row 0: 0.1 - 0.2 + 0.15 + 0.8 + 0.5 + 0.05 + 0.25 = 1.65
        // row 1: -0.5 - 0.4 - 0.15 + 0.4 - 0.1 - 0.05 - 0.5 = -1.30
        assert!((h.s[0] - 1.65f64.tanh()).abs() < 1e-15);
        assert!((h.s[1] - (-1.30f64).tanh()).abs() < 1e-15);
        assert_eq!(h, encode(&p, &[1.0, -1.0], &obs, &[0.25, -0.5]));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[1.0, 1.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let q = softmax(&[2f64.ln() + 7.5, 7.5]);
        assert!((p[0] - q[0]).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax(&[1e4, -1e4, 0.0, 1e4]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_action_examples() {
        assert_eq!(select_action(&ActionDistribution::from_probs(vec![0.2, 0.5, 0.3])), 1);
        assert_eq!(select_action(&ActionDistribution::from_probs(vec![0.5, 0.5])), 0);
        assert_eq!(select_action(&ActionDistribution::from_probs(vec![1.0])), 0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-1e4f64..1e4, 1..12)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn argmax_invariant_under_monotone_maps(logits in prop::collection::vec(-20f64..20.0, 1..10), a in 0.1f64..5.0, c in -10f64..10.0) {
            let base = select_action(&ActionDistribution::from_logits(logits.clone()));
            let affine: Vec<f64> = logits.iter().map(|z| a * z + c).collect();
            let cubic: Vec<f64> = logits.iter().map(|z| z * z * z + z).collect();
            prop_assert_eq!(select_action(&ActionDistribution::from_logits(affine)), base);
            prop_assert_eq!(select_action(&ActionDistribution::from_logits(cubic)), base);
        }
    }

    fn weighted_objective(params: &PolicyParams, r: &Rollout, instruction: &[f64], wl: &[Vec<f64>], ws: &[Vec<f64>]) -> f64 {
        r.steps
            .iter()
            .enumerate()
            .map(|(t, step)| {
                let (cache, dist) = forward_step(params, instruction, &step.observation, &step.history_mean);
                let a: f64 = dist.logits.iter().zip(&wl[t]).map(|(x, y)| x * y).sum();
                let b: f64 = cache.state.s.iter().zip(&ws[t]).map(|(x, y)| x * y).sum();
                a + b
            })
            .sum()
    }

    /// Relative error with a floor: at eps = 1e-4 the central difference
    /// itself is only good to about 1e-9 absolute, so smaller entries are
    /// compared against `floor` instead of their own magnitude.
    pub(crate) fn rel_err(an: f64, fd: f64, floor: f64) -> f64 {
        (an - fd).abs() / an.abs().max(fd.abs()).max(floor)
    }

    #[test]
    fn backward_matches_finite_differences() {
        // (eps, floor): the prescribed step, plus a finer one that resolves
        // small entries.
        for (eps, floor) in [(1e-4, 1e-2), (1e-5, 1e-3)] {
            for seed in 0..100 {
                let (world, task, params) = random_case(seed);
                let r = rollout(&params, &world, &task);
                let mut rng = rng::stream(seed, "weights", 0);
                let wl: Vec<Vec<f64>> = r.steps.iter().map(|s| (0..s.dist.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let ws: Vec<Vec<f64>> = r.steps.iter().map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let grad = backward(&params, &r.caches(), &wl, Some(&ws));
                for i in 0..params.dims().param_count() {
                    let mut plus = params.clone();
                    plus.as_mut_slice()[i] += eps;
                    let mut minus = params.clone();
                    minus.as_mut_slice()[i] -= eps;
                    let fd = (weighted_objective(&plus, &r, &task.instruction, &wl, &ws)
                        - weighted_objective(&minus, &r, &task.instruction, &wl, &ws))
                        / (2.0 * eps);
                    let an = grad.as_slice()[i];
                    assert!(rel_err(an, fd, floor) < 1e-6, "eps {eps} seed {seed} param {i}: analytic {an} vs fd {fd}");
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_steps() {
        let (world, task, params) = random_case(3);
        let r = rollout(&params, &world, &task);
        let caches = r.caches();
        let dl: Vec<Vec<f64>> = r.steps.iter().map(|s| vec![0.3; s.dist.len()].iter().enumerate().map(|(i, x)| x * i as f64 - 0.2).collect()).collect();
        let zero: Vec<Vec<f64>> = dl.iter().map(|v| vec![0.0; v.len()]).collect();
        assert_eq!(backward(&params, &caches, &zero, None).norm(), 0.0);
        let whole = backward(&params, &caches, &dl, None);
        let mut parts = ParamGradient::zeros(params.dims());
        for t in 0..caches.len() {
            parts.add_assign(&backward(&params, &caches[t..t + 1], &dl[t..t + 1], None));
        }
        for (a, b) in whole.as_slice().iter().zip(parts.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "stale step cache")]
    fn backward_rejects_stale_cache() {
        let (world, task, mut params) = random_case(1);
        let r = rollout(&params, &world, &task);
        params.as_mut_slice()[0] += 1.0;
        let dl: Vec<Vec<f64>> = r.steps.iter().map(|s| vec![0.0; s.dist.len()]).collect();
        backward(&params, &r.caches(), &dl, None);
    }

    #[test]
    fn rollout_is_greedy_and_well_formed() {
        let (world, task, params) = random_case(5);
        let r = rollout(&params, &world, &task);
        assert_eq!(r.steps[0].node, task.start);
        assert!(r.steps.len() <= task.max_steps);
        for w in r.steps.windows(2) {
            let s = &w[0];
            assert_eq!(s.selected, select_action(&s.dist));
            assert_eq!(s.observation.candidates[s.selected].target, Some(w[1].node));
        }
        assert_eq!(rollout(&params, &world, &task).path(), r.path());
    }

    #[test]
    fn expert_walks_shortest_path_and_stops_in_radius() {
        let nodes = (0..5).map(|id| Node { id, position: [0.0, 0.0], features: vec![0.0; 2] }).collect();
        let edges = (0..4).map(|u| Edge { u, v: u + 1, length: 2.0 }).collect();
        let world = GraphWorld::from_parts(nodes, edges, 0).unwrap();
        let task = Task { start: 0, goal: 4, instruction: vec![0.0; 2], success_radius: 3.0, max_steps: 20 };
        let demos = expert_demonstrations(&world, &task);
        let actions: Vec<_> = demos.iter().map(|d| (d.observation.current, d.expert_action)).collect();
        // From node 3 the goal is 2 m away, so the expert stops there.
        assert_eq!(actions, vec![(0, 1), (1, 2), (2, 2), (3, 0)]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (world, _, _) = random_case(2);
        let demos = demonstrations_for(&[world], &envgraph::TaskParams::default(), 3, 0).unwrap();
        let dims = PolicyDims::new(4, 4);
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        assert_eq!(pretrain_bc(&demos, dims, &cfg, 9).params, PolicyParams::init(dims, 9));
    }

    #[test]
    fn cosine_schedule_anneals_to_zero() {
        let cfg = PretrainConfig { epochs: 100, learning_rate: 0.4, ..PretrainConfig::default() };
        assert_eq!(bc_learning_rate(&cfg, 0), 0.4);
        assert!((bc_learning_rate(&cfg, 50) - 0.2).abs() < 1e-12);
        assert!(bc_learning_rate(&cfg, 99) < 1e-3);
        let lrs: Vec<f64> = (0..100).map(|e| bc_learning_rate(&cfg, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let flat = PretrainConfig { cosine_decay: false, ..cfg };
        assert!((0..100).all(|e| bc_learning_rate(&flat, e) == 0.4));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let p = PolicyParams::init(PolicyDims::new(3, 2), 4);
        let mut buf = Vec::new();
        p.write_checkpoint(4, &mut buf).unwrap();
        let (back, header) = PolicyParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        assert_eq!(header.seed, 4);
        assert!(PolicyParams::read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}

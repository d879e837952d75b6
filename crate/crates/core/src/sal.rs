//! Self-active learning: uncertainty routing between a human oracle and the
//! agent's own outcome predictor, plus the per-episode adaptation step.

use serde::{Deserialize, Serialize};

use crate::envgraph::{self, GraphWorld, NodeId, Task};
use crate::error::{Error, Result};
use crate::meo;
use crate::oracles::{FeedbackOracle, HumanQuery, Responder};
use crate::policy::{self, PolicyParams, Rollout};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_ETA: f64 = 5e-3;

/// Per-step entropy and hidden-state memories of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMemory {
    pub step_entropies: Vec<f64>,
    pub step_states: Vec<Vec<f64>>,
    pub trajectory: Vec<(NodeId, usize)>,
}

impl EpisodeMemory {
    pub fn from_rollout(rollout: &Rollout) -> Self {
        Self {
            step_entropies: rollout.steps.iter().map(|s| meo::entropy(&s.dist.probs)).collect(),
            step_states: rollout.steps.iter().map(|s| s.cache.state.s.clone()).collect(),
            trajectory: rollout.steps.iter().map(|s| (s.node, s.selected)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.step_entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_entropies.is_empty()
    }

    /// Episode-averaged hidden state.
    pub fn mean_state(&self) -> Result<Vec<f64>> {
        let first = self.step_states.first().ok_or(Error::EmptyEpisode)?;
        let mut avg = vec![0.0; first.len()];
        for s in &self.step_states {
            for (a, x) in avg.iter_mut().zip(s) {
                *a += x;
            }
        }
        let n = self.step_states.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        Ok(avg)
    }
}

/// Affine outcome predictor `f(s) = w . s + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfHeadParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl SelfHeadParams {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }

    pub fn logit(&self, s: &[f64]) -> f64 {
        self.w.iter().zip(s).map(|(w, s)| w * s).sum::<f64>() + self.b
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Human,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleDecision {
    pub source: Source,
    pub mean_entropy: f64,
    pub threshold: f64,
}

impl OracleDecision {
    pub fn new(mean_entropy: f64, threshold: f64) -> Self {
        Self {
            source: route_oracle(mean_entropy, threshold),
            mean_entropy,
            threshold,
        }
    }
}

/// Mean policy entropy over the episode.
pub fn mean_entropy(memory: &EpisodeMemory) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    Ok(memory.step_entropies.iter().sum::<f64>() / memory.len() as f64)
}

/// Human iff the mean entropy strictly exceeds `delta`.
pub fn route_oracle(mean_entropy: f64, delta: f64) -> Source {
    if mean_entropy > delta {
        Source::Human
    } else {
        Source::Agent
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Predicted success: `sigmoid(f(s_avg)) > 0.5`, i.e. `f(s_avg) > 0`.
pub fn self_predict(head: &SelfHeadParams, memory: &EpisodeMemory) -> Result<bool> {
    Ok(head.logit(&memory.mean_state()?) > 0.0)
}

/// Binary cross-entropy in logit form: `softplus(f) - y f`.
pub fn bce_from_logit(f: f64, label: bool) -> f64 {
    softplus(f) - if label { f } else { 0.0 }
}

pub fn self_loss(head: &SelfHeadParams, memory: &EpisodeMemory, label: bool) -> Result<f64> {
    Ok(bce_from_logit(head.logit(&memory.mean_state()?), label))
}

/// `d bce / d f = sigmoid(f) - y`.
pub fn bce_logit_gradient(f: f64, label: bool) -> f64 {
    sigmoid(f) - if label { 1.0 } else { 0.0 }
}

/// Gradients of the self loss: with respect to the head, and with respect
/// to each step's hidden state (the label is a constant).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfLossGradient {
    pub w: Vec<f64>,
    pub b: f64,
    pub states: Vec<Vec<f64>>,
}

pub fn self_loss_gradient(head: &SelfHeadParams, memory: &EpisodeMemory, label: bool) -> Result<SelfLossGradient> {
    let s_avg = memory.mean_state()?;
    let df = bce_logit_gradient(head.logit(&s_avg), label);
    let per_step: Vec<f64> = head.w.iter().map(|w| df * w / memory.len() as f64).collect();
    Ok(SelfLossGradient {
        w: s_avg.iter().map(|s| df * s).collect(),
        b: df,
        states: vec![per_step; memory.len()],
    })
}

pub fn total_loss(l_mix: f64, l_self: f64, gamma: f64) -> f64 {
    l_mix + gamma * l_self
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub eta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            lambda: meo::DEFAULT_LAMBDA,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        meo::MixtureConfig::new(self.lambda)?;
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidParameter(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Policy and self-head parameters owned by one adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    pub policy: PolicyParams,
    pub head: SelfHeadParams,
    pub hyper: Hyperparameters,
}

impl AdaptationState {
    /// Pretrained policy with a zero self-head.
    pub fn new(policy: PolicyParams, hyper: Hyperparameters) -> Result<Self> {
        hyper.validate()?;
        let head = SelfHeadParams::zeros(policy.dims().hidden);
        Ok(Self { policy, head, hyper })
    }
}

/// Where the label used for the update came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    #[serde(rename = "human")]
    Human,
    #[serde(rename = "agent")]
    Agent,
    #[serde(rename = "agent(fallback)")]
    AgentFallback,
}

impl LabelSource {
    pub fn routed(&self) -> Source {
        match self {
            LabelSource::Agent => Source::Agent,
            LabelSource::Human | LabelSource::AgentFallback => Source::Human,
        }
    }
}

/// Everything one adaptation episode produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub source: LabelSource,
    pub mean_entropy: f64,
    pub true_success: bool,
    pub label_used: Option<bool>,
    pub self_prediction: Option<bool>,
    pub l_mix: f64,
    pub l_self: f64,
    pub l_total: f64,
    pub trajectory: Vec<(NodeId, usize)>,
    pub step_entropies: Vec<f64>,
    pub step_mix_entropies: Vec<f64>,
    pub final_node: NodeId,
    pub truncated: bool,
    pub updated: bool,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }

    /// Visited nodes including the final one.
    pub fn path(&self) -> Vec<NodeId> {
        let mut p: Vec<NodeId> = self.trajectory.iter().map(|(n, _)| *n).collect();
        if p.last() != Some(&self.final_node) {
            p.push(self.final_node);
        }
        p
    }
}

/// Who labels the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Route by mean entropy against `delta`.
    Uncertainty,
    /// Routing decided by the caller (sampling baselines).
    Forced(Source),
}

/// Runs one episode and takes a single gradient step on
/// `L_mix + gamma * L_self` for both the policy and the self-head.
pub fn adapt_episode(
    state: &mut AdaptationState,
    world: &GraphWorld,
    task: &Task,
    episode_id: u64,
    routing: Routing,
    oracle: &mut dyn FeedbackOracle,
) -> Result<EpisodeRecord> {
    let hyper = state.hyper;
    let rollout = policy::rollout(&state.policy, world, task);
    let memory = EpisodeMemory::from_rollout(&rollout);
    let mean_h = mean_entropy(&memory)?;
    let source = match routing {
        Routing::Uncertainty => route_oracle(mean_h, hyper.delta),
        Routing::Forced(s) => s,
    };
    let self_prediction = self_predict(&state.head, &memory)?;
    let true_success = envgraph::is_success(world, rollout.final_node, task);
    let (label, label_source) = match source {
        Source::Agent => (self_prediction, LabelSource::Agent),
        Source::Human => {
            let query = HumanQuery {
                episode_id,
                world,
                task,
                rollout: &rollout,
                mean_entropy: mean_h,
                threshold: hyper.delta,
                agent_prediction: self_prediction,
            };
            let answer = oracle.human_feedback(&query)?;
            let ls = match answer.responder {
                Responder::AgentFallback => LabelSource::AgentFallback,
                _ => LabelSource::Human,
            };
            (answer.success, ls)
        }
    };

    let (dists, selected): (Vec<_>, Vec<_>) = rollout.steps.iter().map(|s| (s.dist.clone(), s.selected)).unzip();
    let mix = meo::episode_entropy(&dists, &selected, hyper.lambda)?;
    let l_mix = meo::signed_entropy_loss(mix.mean, label);
    let l_self = self_loss(&state.head, &memory, label)?;
    let l_total = total_loss(l_mix, l_self, hyper.gamma);

    let d_logits = meo::mixture_loss_logit_gradients(&dists, &selected, hyper.lambda, label)?;
    let self_grad = self_loss_gradient(&state.head, &memory, label)?;
    let d_states: Vec<Vec<f64>> = self_grad
        .states
        .iter()
        .map(|v| v.iter().map(|x| hyper.gamma * x).collect())
        .collect();
    let policy_grad = policy::backward(&state.policy, &rollout.caches(), &d_logits, Some(&d_states));
    state.policy.descend(&policy_grad, hyper.eta);
    for (w, g) in state.head.w.iter_mut().zip(&self_grad.w) {
        *w -= hyper.eta * hyper.gamma * g;
    }
    state.head.b -= hyper.eta * hyper.gamma * self_grad.b;
    assert!(state.head.is_finite(), "self-head parameters became non-finite");

    Ok(EpisodeRecord {
        episode_id,
        source: label_source,
        mean_entropy: mean_h,
        true_success,
        label_used: Some(label),
        self_prediction: Some(self_prediction),
        l_mix,
        l_self,
        l_total,
        trajectory: memory.trajectory,
        step_entropies: memory.step_entropies,
        step_mix_entropies: mix.per_step_mix_entropy,
        final_node: rollout.final_node,
        truncated: rollout.truncated,
        updated: true,
    })
}

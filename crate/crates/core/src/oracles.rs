//! Feedback backends for the episodic success label.
//!
//! The adaptation loop only sees [`FeedbackOracle`]. Automated experiments
//! use [`GroundTruthOracle`]; serve mode uses [`InteractiveOracle`], which
//! parks a [`FeedbackRequest`] on a shared [`FeedbackQueue`] and blocks the
//! owning run until an HTTP handler posts the matching response.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envgraph::{self, GraphWorld, NodeId, Task};
use crate::error::{Error, Result};
use crate::policy::Rollout;
use crate::rng;
use crate::sal::{self, EpisodeMemory, SelfHeadParams};

/// Which backend produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Responder {
    #[serde(rename = "ground_truth")]
    GroundTruth,
    #[serde(rename = "agent")]
    Agent,
    #[serde(rename = "human")]
    Human,
    #[serde(rename = "agent(fallback)")]
    AgentFallback,
}

/// Everything an oracle may inspect about an uncertain episode.
pub struct HumanQuery<'a> {
    pub episode_id: u64,
    pub world: &'a GraphWorld,
    pub task: &'a Task,
    pub rollout: &'a Rollout,
    pub mean_entropy: f64,
    pub threshold: f64,
    /// The self-head's verdict, used by timeout fallbacks.
    pub agent_prediction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HumanAnswer {
    pub success: bool,
    pub responder: Responder,
}

pub trait FeedbackOracle {
    fn human_feedback(&mut self, query: &HumanQuery<'_>) -> Result<HumanAnswer>;
}

/// Benchmark success, flipped with seeded probability `noise_rate`.
pub fn ground_truth_feedback(world: &GraphWorld, task: &Task, final_node: NodeId, noise_rate: f64, seed: u64) -> Result<bool> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::InvalidParameter(format!("noise_rate must lie in [0, 1], got {noise_rate}")));
    }
    let truth = envgraph::is_success(world, final_node, task);
    let flip = noise_rate > 0.0 && rng::stream(seed, "label_noise", 0).gen::<f64>() < noise_rate;
    Ok(truth != flip)
}

/// The agent's own outcome prediction.
pub fn agent_feedback(head: &SelfHeadParams, memory: &EpisodeMemory) -> Result<bool> {
    sal::self_predict(head, memory)
}

/// Simulated human: the benchmark's success criterion with optional noise.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    noise_rate: f64,
    seed: u64,
}

impl GroundTruthOracle {
    pub fn new(noise_rate: f64, seed: u64) -> Self {
        Self { noise_rate, seed }
    }
}

impl FeedbackOracle for GroundTruthOracle {
    fn human_feedback(&mut self, q: &HumanQuery<'_>) -> Result<HumanAnswer> {
        let seed = rng::derive_seed(self.seed, "episode_noise", q.episode_id);
        let success = ground_truth_feedback(q.world, q.task, q.rollout.final_node, self.noise_rate, seed)?;
        Ok(HumanAnswer {
            success,
            responder: Responder::GroundTruth,
        })
    }
}

/// Always answers the same label.
#[derive(Debug, Clone, Copy)]
pub struct FixedOracle(pub bool);

impl FeedbackOracle for FixedOracle {
    fn human_feedback(&mut self, _: &HumanQuery<'_>) -> Result<HumanAnswer> {
        Ok(HumanAnswer {
            success: self.0,
            responder: Responder::Human,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub node: NodeId,
    pub position: [f64; 2],
}

/// Payload shown to the human judging an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub episode_id: u64,
    pub instruction: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub start: NodeId,
    pub goal: NodeId,
    pub goal_position: [f64; 2],
    pub success_radius: f64,
    pub mean_entropy: f64,
    pub threshold: f64,
    /// Monotonic sequence number assigned on enqueue.
    pub created_at: u64,
}

impl FeedbackRequest {
    pub fn from_query(q: &HumanQuery<'_>) -> Self {
        let trajectory = q
            .rollout
            .path()
            .into_iter()
            .map(|node| TrajectoryPoint {
                node,
                position: q.world.position(node),
            })
            .collect();
        Self {
            episode_id: q.episode_id,
            instruction: q.task.instruction.clone(),
            trajectory,
            start: q.task.start,
            goal: q.task.goal,
            goal_position: q.world.position(q.task.goal),
            success_radius: q.task.success_radius,
            mean_entropy: q.mean_entropy,
            threshold: q.threshold,
            created_at: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub episode_id: u64,
    pub success: bool,
    #[serde(default = "default_responder")]
    pub responder: Responder,
}

fn default_responder() -> Responder {
    Responder::Human
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RespondError {
    #[error("no outstanding request for episode {0}")]
    UnknownEpisode(u64),
    #[error("episode {0} was already answered")]
    Duplicate(u64),
}

#[derive(Debug, Default)]
struct QueueState {
    pending: VecDeque<FeedbackRequest>,
    answers: HashMap<u64, bool>,
    closed: HashSet<u64>,
    next_seq: u64,
}

/// FIFO of outstanding feedback requests shared between a run loop and
/// HTTP handlers.
#[derive(Debug, Default)]
pub struct FeedbackQueue {
    state: Mutex<QueueState>,
    answered: Condvar,
}

impl FeedbackQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues a request and returns its sequence number.
    pub fn submit(&self, mut request: FeedbackRequest) -> u64 {
        let mut st = self.state.lock().expect("feedback queue poisoned");
        request.created_at = st.next_seq;
        st.next_seq += 1;
        let seq = request.created_at;
        st.pending.push_back(request);
        seq
    }

    /// The oldest unanswered request.
    pub fn pending(&self) -> Option<FeedbackRequest> {
        self.state.lock().expect("feedback queue poisoned").pending.front().cloned()
    }

    pub fn pending_len(&self) -> usize {
        self.state.lock().expect("feedback queue poisoned").pending.len()
    }

    /// Records a response. The first response for an episode wins.
    pub fn respond(&self, response: &FeedbackResponse) -> std::result::Result<(), RespondError> {
        let mut st = self.state.lock().expect("feedback queue poisoned");
        let id = response.episode_id;
        if st.closed.contains(&id) || st.answers.contains_key(&id) {
            return Err(RespondError::Duplicate(id));
        }
        let pos = st
            .pending
            .iter()
            .position(|r| r.episode_id == id)
            .ok_or(RespondError::UnknownEpisode(id))?;
        st.pending.remove(pos);
        st.answers.insert(id, response.success);
        drop(st);
        self.answered.notify_all();
        Ok(())
    }

    /// Blocks until `episode_id` is answered or `timeout` elapses. On
    /// timeout the request is withdrawn and later responses are rejected.
    pub fn wait(&self, episode_id: u64, timeout: Duration) -> Option<bool> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().expect("feedback queue poisoned");
        loop {
            if let Some(answer) = st.answers.remove(&episode_id) {
                st.closed.insert(episode_id);
                return Some(answer);
            }
            let now = Instant::now();
            if now >= deadline {
                st.pending.retain(|r| r.episode_id != episode_id);
                st.closed.insert(episode_id);
                return None;
            }
            st = self.answered.wait_timeout(st, deadline - now).expect("feedback queue poisoned").0;
        }
    }
}

/// Enqueues `request` and waits for the human's verdict.
pub fn interactive_feedback(queue: &FeedbackQueue, request: FeedbackRequest, timeout: Duration) -> Option<bool> {
    let id = request.episode_id;
    queue.submit(request);
    queue.wait(id, timeout)
}

/// What to do when the human does not answer in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutFallback {
    /// Use the self-head's prediction and log the episode as a fallback.
    Agent,
    /// Surface the timeout as an error.
    Fail,
}

pub struct InteractiveOracle<Q: std::ops::Deref<Target = FeedbackQueue>> {
    queue: Q,
    timeout: Duration,
    fallback: TimeoutFallback,
}

impl<Q: std::ops::Deref<Target = FeedbackQueue>> InteractiveOracle<Q> {
    pub fn new(queue: Q, timeout: Duration, fallback: TimeoutFallback) -> Self {
        Self {
            queue,
            timeout,
            fallback,
        }
    }
}

impl<Q: std::ops::Deref<Target = FeedbackQueue>> FeedbackOracle for InteractiveOracle<Q> {
    fn human_feedback(&mut self, q: &HumanQuery<'_>) -> Result<HumanAnswer> {
        match interactive_feedback(&self.queue, FeedbackRequest::from_query(q), self.timeout) {
            Some(success) => Ok(HumanAnswer {
                success,
                responder: Responder::Human,
            }),
            None => match self.fallback {
                TimeoutFallback::Agent => Ok(HumanAnswer {
                    success: q.agent_prediction,
                    responder: Responder::AgentFallback,
                }),
                TimeoutFallback::Fail => Err(Error::Feedback(format!(
                    "no response for episode {} within {:?}",
                    q.episode_id, self.timeout
                ))),
            },
        }
    }
}

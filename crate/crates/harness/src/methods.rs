//! Per-episode behavior of each adaptation method.

use navadapt_core::envgraph::{self, GraphWorld, Task};
use navadapt_core::meo;
use navadapt_core::oracles::{FeedbackOracle, HumanQuery, Responder};
use navadapt_core::policy::{self, Rollout};
use navadapt_core::sal::{self, AdaptationState, EpisodeMemory, EpisodeRecord, LabelSource, Routing, Source};
use navadapt_core::Result;

use crate::config::Method;

/// Runs one test episode under `method`. `feedback` says whether this
/// episode is in the human-feedback set; for uncertainty sampling it is
/// `None` and the entropy threshold decides.
pub fn run_episode(
    method: Method,
    state: &mut AdaptationState,
    world: &GraphWorld,
    task: &Task,
    episode_id: u64,
    feedback: Option<bool>,
    oracle: &mut dyn FeedbackOracle,
) -> Result<EpisodeRecord> {
    let routing = match feedback {
        None => Routing::Uncertainty,
        Some(true) => Routing::Forced(Source::Human),
        Some(false) => Routing::Forced(Source::Agent),
    };
    match method {
        Method::Atena => sal::adapt_episode(state, world, task, episode_id, routing, oracle),
        Method::None => {
            let rollout = policy::rollout(&state.policy, world, task);
            frozen_record(&rollout, world, task, episode_id, state.hyper.lambda)
        }
        Method::EntropyMin => {
            let rollout = policy::rollout(&state.policy, world, task);
            let mut rec = frozen_record(&rollout, world, task, episode_id, 0.0)?;
            rec.l_mix = signed_update(state, &rollout, 0.0, true)?;
            rec.l_total = rec.l_mix;
            rec.updated = true;
            Ok(rec)
        }
        Method::EntropyMinAl | Method::MeoAl => {
            let lambda = if method == Method::MeoAl { state.hyper.lambda } else { 0.0 };
            let rollout = policy::rollout(&state.policy, world, task);
            let mut rec = frozen_record(&rollout, world, task, episode_id, lambda)?;
            let ask = match routing {
                Routing::Uncertainty => sal::route_oracle(rec.mean_entropy, state.hyper.delta) == Source::Human,
                Routing::Forced(s) => s == Source::Human,
            };
            if ask {
                let query = HumanQuery {
                    episode_id,
                    world,
                    task,
                    rollout: &rollout,
                    mean_entropy: rec.mean_entropy,
                    threshold: state.hyper.delta,
                    agent_prediction: false,
                };
                let answer = oracle.human_feedback(&query)?;
                if answer.responder == Responder::AgentFallback {
                    // No self-head to fall back on: skip the update.
                    rec.source = LabelSource::AgentFallback;
                } else {
                    rec.source = LabelSource::Human;
                    rec.label_used = Some(answer.success);
                    rec.l_mix = signed_update(state, &rollout, lambda, answer.success)?;
                    rec.l_total = rec.l_mix;
                    rec.updated = true;
                }
            }
            Ok(rec)
        }
    }
}

/// Gradient step on the outcome-signed mixture entropy; returns the loss.
fn signed_update(state: &mut AdaptationState, rollout: &Rollout, lambda: f64, success: bool) -> Result<f64> {
    let loss = meo::mixture_loss(rollout, lambda, success)?;
    let grad = meo::mixture_loss_gradient(&state.policy, rollout, lambda, success)?;
    state.policy.descend(&grad, state.hyper.eta);
    Ok(loss)
}

fn frozen_record(rollout: &Rollout, world: &GraphWorld, task: &Task, episode_id: u64, lambda: f64) -> Result<EpisodeRecord> {
    let memory = EpisodeMemory::from_rollout(rollout);
    let (dists, selected): (Vec<_>, Vec<_>) = rollout.steps.iter().map(|s| (s.dist.clone(), s.selected)).unzip();
    let mix = meo::episode_entropy(&dists, &selected, lambda)?;
    Ok(EpisodeRecord {
        episode_id,
        // Methods without feedback never consult anyone; run.rs drops this.
        source: LabelSource::Agent,
        mean_entropy: sal::mean_entropy(&memory)?,
        true_success: envgraph::is_success(world, rollout.final_node, task),
        label_used: None,
        self_prediction: None,
        l_mix: 0.0,
        l_self: 0.0,
        l_total: 0.0,
        trajectory: memory.trajectory,
        step_entropies: memory.step_entropies,
        step_mix_entropies: mix.per_step_mix_entropy,
        final_node: rollout.final_node,
        truncated: rollout.truncated,
        updated: false,
    })
}

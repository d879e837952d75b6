//! Mixture entropy optimization.
//!
//! The mixture distribution blends the policy with a one-hot pseudo-expert
//! at the policy's own argmax:
//!
//! ```text
//! q_mix(a) = lambda * [a == sel] + (1 - lambda) * pi(a)
//! ```
//!
//! Its per-step entropy, averaged over the episode, is minimized on
//! successful episodes and maximized on failed ones. The pseudo-expert is a
//! constant: no gradient flows through the argmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, ActionDistribution, ParamGradient, PolicyParams, Rollout};

pub const DEFAULT_LAMBDA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    lambda: f64,
}

impl MixtureConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// Per-step mixture entropies of an episode and their mean, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntropy {
    pub per_step_mix_entropy: Vec<f64>,
    pub mean: f64,
}

/// Mixes `pi` with a point mass at `selected`.
pub fn mixture_distribution(pi: &ActionDistribution, selected: usize, lambda: f64) -> Result<ActionDistribution> {
    check_lambda(lambda)?;
    if selected >= pi.len() {
        return Err(Error::InvalidParameter(format!(
            "selected action {selected} out of range for {} candidates",
            pi.len()
        )));
    }
    let probs = pi
        .probs
        .iter()
        .enumerate()
        .map(|(a, p)| if a == selected { lambda + (1.0 - lambda) * p } else { (1.0 - lambda) * p })
        .collect();
    Ok(ActionDistribution::from_probs(probs))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mixture entropy of every step and its mean.
pub fn episode_entropy(dists: &[ActionDistribution], selected: &[usize], lambda: f64) -> Result<EpisodeEntropy> {
    if dists.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    assert_eq!(dists.len(), selected.len(), "one selected action per step");
    let per_step_mix_entropy = dists
        .iter()
        .zip(selected)
        .map(|(pi, &sel)| mixture_distribution(pi, sel, lambda).map(|q| entropy(&q.probs)))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_step_mix_entropy.iter().sum::<f64>() / per_step_mix_entropy.len() as f64;
    Ok(EpisodeEntropy {
        per_step_mix_entropy,
        mean,
    })
}

/// `I * H' - (1 - I) * H'`.
pub fn signed_entropy_loss(mean_entropy: f64, success: bool) -> f64 {
    let indicator = if success { 1.0 } else { 0.0 };
    indicator * mean_entropy - (1.0 - indicator) * mean_entropy
}

/// Outcome-signed mean mixture entropy of an episode given its per-step
/// policy distributions and selected actions.
pub fn mixture_loss_from(dists: &[ActionDistribution], selected: &[usize], lambda: f64, success: bool) -> Result<f64> {
    let h = episode_entropy(dists, selected, lambda)?;
    Ok(signed_entropy_loss(h.mean, success))
}

pub fn mixture_loss(episode: &Rollout, lambda: f64, success: bool) -> Result<f64> {
    let (dists, selected) = decisions(episode);
    mixture_loss_from(&dists, &selected, lambda, success)
}

fn decisions(episode: &Rollout) -> (Vec<ActionDistribution>, Vec<usize>) {
    episode.steps.iter().map(|s| (s.dist.clone(), s.selected)).unzip()
}

/// Gradient of `H(q_mix)` with respect to the policy logits.
///
/// With `g_a = -(ln q_a + 1)` and `dq_a/dz_b = (1 - lambda) pi_a (delta_ab - pi_b)`:
/// `dH/dz_b = (1 - lambda) pi_b (g_b - sum_a pi_a g_a)`.
pub fn mixture_entropy_logit_gradient(pi: &ActionDistribution, selected: usize, lambda: f64) -> Result<Vec<f64>> {
    let q = mixture_distribution(pi, selected, lambda)?;
    let g: Vec<f64> = q
        .probs
        .iter()
        .map(|&qa| if qa > 0.0 { -(qa.ln() + 1.0) } else { 0.0 })
        .collect();
    let mean_g: f64 = pi.probs.iter().zip(&g).map(|(p, g)| p * g).sum();
    Ok(pi
        .probs
        .iter()
        .zip(&g)
        .map(|(p, gb)| (1.0 - lambda) * p * (gb - mean_g))
        .collect())
}

/// Per-step logit gradients of the episode loss.
pub fn mixture_loss_logit_gradients(
    dists: &[ActionDistribution],
    selected: &[usize],
    lambda: f64,
    success: bool,
) -> Result<Vec<Vec<f64>>> {
    if dists.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    let sign = signed_entropy_loss(1.0, success);
    let scale = sign / dists.len() as f64;
    dists
        .iter()
        .zip(selected)
        .map(|(pi, &sel)| {
            mixture_entropy_logit_gradient(pi, sel, lambda).map(|g| g.into_iter().map(|x| scale * x).collect())
        })
        .collect()
}

/// Exact gradient of [`mixture_loss`] with respect to the policy parameters.
pub fn mixture_loss_gradient(params: &PolicyParams, episode: &Rollout, lambda: f64, success: bool) -> Result<ParamGradient> {
    let (dists, selected) = decisions(episode);
    let d_logits = mixture_loss_logit_gradients(&dists, &selected, lambda, success)?;
    Ok(policy::backward(params, &episode.caches(), &d_logits, None))
}

//! Navigation metrics (SR, OSR, SPL, TL, NE) and run-level diagnostics.

use serde::{Deserialize, Serialize};

use crate::envgraph::{GraphWorld, NodeId, Task};
use crate::sal::LabelSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Trajectory length in meters.
    pub tl: f64,
    /// Navigation error: geodesic from the final node to the goal.
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl_term: f64,
}

/// Metrics for a path of visited nodes starting at `task.start`.
///
/// Panics if the path is empty, does not start at the task start, or
/// contains a hop that is not an edge.
pub fn episode_metrics(world: &GraphWorld, task: &Task, path: &[NodeId]) -> EpisodeMetrics {
    assert_eq!(path.first(), Some(&task.start), "trajectory must start at the task start");
    let tl: f64 = path
        .windows(2)
        .map(|w| world.edge_length(w[0], w[1]).expect("consecutive nodes must be adjacent"))
        .sum();
    let to_goal = world.distances_from(task.goal);
    let final_node = *path.last().expect("non-empty");
    let ne = to_goal[final_node];
    let success = ne <= task.success_radius;
    let oracle_success = path.iter().any(|&n| to_goal[n] <= task.success_radius);
    let shortest = to_goal[task.start];
    let spl_term = if success { shortest / tl.max(shortest) } else { 0.0 };
    EpisodeMetrics {
        tl,
        ne,
        success,
        oracle_success,
        spl_term,
    }
}

/// One episode's contribution to a run report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub metrics: EpisodeMetrics,
    pub steps: usize,
    /// `None` for methods that never consult an oracle.
    pub source: Option<LabelSource>,
    pub self_prediction: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub episodes: usize,
    /// Percentages.
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub mean_tl: f64,
    pub mean_ne: f64,
    pub active_episode_ratio: f64,
    pub active_step_ratio: f64,
    pub fallback_episodes: usize,
    pub confusion: Confusion,
    pub self_accuracy: Option<f64>,
}

impl RunReport {
    pub const CSV_HEADER: [&'static str; 15] = [
        "episodes",
        "sr",
        "osr",
        "spl",
        "mean_tl",
        "mean_ne",
        "active_episode_ratio",
        "active_step_ratio",
        "fallback_episodes",
        "tp",
        "fp",
        "tn",
        "fn",
        "self_accuracy",
        "self_predictions",
    ];

    /// One flat CSV row, aligned with `CSV_HEADER`. A missing self accuracy
    /// is an empty cell.
    pub fn csv_row(&self) -> Vec<String> {
        let c = &self.confusion;
        vec![
            self.episodes.to_string(),
            self.sr.to_string(),
            self.osr.to_string(),
            self.spl.to_string(),
            self.mean_tl.to_string(),
            self.mean_ne.to_string(),
            self.active_episode_ratio.to_string(),
            self.active_step_ratio.to_string(),
            self.fallback_episodes.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            self.self_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            c.total().to_string(),
        ]
    }
}

/// Aggregates episodes into a report. Active ratios count episodes a human
/// actually answered.
pub fn aggregate(episodes: &[EpisodeSummary]) -> RunReport {
    let n = episodes.len();
    let nf = n.max(1) as f64;
    let pct = |count: usize| 100.0 * count as f64 / nf;
    let total_steps: usize = episodes.iter().map(|e| e.steps).sum();
    let human: Vec<&EpisodeSummary> = episodes
        .iter()
        .filter(|e| e.source == Some(LabelSource::Human))
        .collect();
    let human_steps: usize = human.iter().map(|e| e.steps).sum();
    let mut confusion = Confusion::default();
    for e in episodes {
        if let Some(pred) = e.self_prediction {
            confusion.record(pred, e.metrics.success);
        }
    }
    RunReport {
        episodes: n,
        sr: pct(episodes.iter().filter(|e| e.metrics.success).count()),
        osr: pct(episodes.iter().filter(|e| e.metrics.oracle_success).count()),
        spl: 100.0 * episodes.iter().map(|e| e.metrics.spl_term).sum::<f64>() / nf,
        mean_tl: episodes.iter().map(|e| e.metrics.tl).sum::<f64>() / nf,
        mean_ne: episodes.iter().map(|e| e.metrics.ne).sum::<f64>() / nf,
        active_episode_ratio: human.len() as f64 / nf,
        active_step_ratio: if total_steps == 0 { 0.0 } else { human_steps as f64 / total_steps as f64 },
        fallback_episodes: episodes
            .iter()
            .filter(|e| e.source == Some(LabelSource::AgentFallback))
            .count(),
        self_accuracy: confusion.accuracy(),
        confusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgraph::{Edge, Node};
    use proptest::prelude::*;

    fn line(lengths: &[f64]) -> GraphWorld {
        let n = lengths.len() + 1;
        let nodes = (0..n).map(|id| Node { id, position: [id as f64, 0.0], features: vec![0.0] }).collect();
        let edges = lengths.iter().enumerate().map(|(u, &l)| Edge { u, v: u + 1, length: l }).collect();
        GraphWorld::from_parts(nodes, edges, 0).unwrap()
    }

    fn task(start: NodeId, goal: NodeId) -> Task {
        Task { start, goal, instruction: vec![0.0], success_radius: 3.0, max_steps: 20 }
    }

    #[test]
    fn optimal_path_has_unit_spl() {
        let w = line(&[4.0, 4.0, 4.0]);
        let m = episode_metrics(&w, &task(0, 3), &[0, 1, 2, 3]);
        assert_eq!((m.tl, m.ne, m.success, m.spl_term), (12.0, 0.0, true, 1.0));
    }

    #[test]
    fn detour_scales_spl() {
        // L* = 10 (start 0 -> goal 2), walked 0-1-0-1-2 = 12... use a 1 m detour leg.
        let w = line(&[1.0, 9.0, 4.0]);
        let m = episode_metrics(&w, &task(0, 2), &[0, 1, 0, 1, 2]);
        assert_eq!(m.tl, 12.0);
        assert!((m.spl_term - 10.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn failure_has_zero_spl_but_may_pass_goal() {
        let w = line(&[4.0, 4.0, 4.0]);
        let m = episode_metrics(&w, &task(0, 2), &[0, 1, 2, 3]);
        assert!(!m.success);
        assert!(m.oracle_success);
        assert_eq!(m.spl_term, 0.0);
        assert_eq!(m.ne, 4.0);
    }

    #[test]
    #[should_panic(expected = "start")]
    fn path_must_start_at_start() {
        let w = line(&[4.0, 4.0]);
        episode_metrics(&w, &task(0, 2), &[1, 2]);
    }

    fn summary(success: bool, source: Option<LabelSource>, pred: Option<bool>) -> EpisodeSummary {
        EpisodeSummary {
            metrics: EpisodeMetrics { tl: 1.0, ne: if success { 0.0 } else { 5.0 }, success, oracle_success: success, spl_term: if success { 1.0 } else { 0.0 } },
            steps: 2,
            source,
            self_prediction: pred,
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[summary(true, None, None), summary(false, None, None), summary(true, None, None)]);
        assert!((r.sr - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.self_accuracy, None);

        let h = Some(LabelSource::Human);
        let a = Some(LabelSource::Agent);
        let r = aggregate(&[summary(true, h, None), summary(true, a, None), summary(false, h, None), summary(true, a, None), summary(false, a, None)]);
        assert!((r.active_episode_ratio - 0.4).abs() < 1e-12);

        let r = aggregate(&[summary(true, a, Some(true)), summary(false, a, Some(false))]);
        assert_eq!(r.self_accuracy, Some(1.0));
        assert_eq!((r.confusion.fp, r.confusion.fn_), (0, 0));
    }

    #[test]
    fn csv_row_matches_header() {
        let r = aggregate(&[summary(true, None, None), summary(false, None, None)]);
        let row = r.csv_row();
        assert_eq!(row.len(), RunReport::CSV_HEADER.len());
        assert_eq!(row[1], "50");
        assert_eq!(row[13], "");
    }

    fn arb_summary() -> impl Strategy<Value = EpisodeSummary> {
        (0.0f64..1.0, any::<bool>(), any::<bool>(), 1usize..20, 0u8..4, prop::option::of(any::<bool>())).prop_map(
            |(spl, success, passed, steps, src, pred)| EpisodeSummary {
                metrics: EpisodeMetrics {
                    tl: steps as f64,
                    ne: if success { 0.0 } else { 4.0 },
                    success,
                    oracle_success: success || passed,
                    spl_term: if success { spl } else { 0.0 },
                },
                steps,
                source: [None, Some(LabelSource::Human), Some(LabelSource::Agent), Some(LabelSource::AgentFallback)][src as usize],
                self_prediction: pred,
            },
        )
    }

    proptest! {
        #[test]
        fn report_invariants(mut eps in prop::collection::vec(arb_summary(), 1..40), seed in any::<u64>()) {
            let r = aggregate(&eps);
            prop_assert!(r.sr <= r.osr + 1e-9);
            prop_assert!(r.spl <= r.sr + 1e-9);
            prop_assert!((0.0..=1.0).contains(&r.active_episode_ratio));
            prop_assert!((0.0..=1.0).contains(&r.active_step_ratio));
            prop_assert_eq!(r.confusion.total(), eps.iter().filter(|e| e.self_prediction.is_some()).count());
            use rand::seq::SliceRandom;
            eps.shuffle(&mut crate::rng::stream(seed, "perm", 0));
            let p = aggregate(&eps);
            prop_assert!((p.sr - r.sr).abs() < 1e-9 && (p.spl - r.spl).abs() < 1e-9 && (p.mean_tl - r.mean_tl).abs() < 1e-9);
            prop_assert_eq!(p.confusion, r.confusion);
        }
    }
}

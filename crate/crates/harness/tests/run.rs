use std::fs;

use navadapt_core::policy;
use navadapt_core::sal::LabelSource;
use navadapt_core::{envgraph, metrics};
use navadapt_harness::report;
use navadapt_harness::run::{self, feedback_plan};
use navadapt_harness::sweep::{self, Grid};
use navadapt_harness::{ExperimentConfig, HarnessError, Method, Sampling};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_seen_worlds: 2,
        n_test_worlds: 2,
        episodes_per_world: 10,
        seeds: vec![5, 6],
        ..ExperimentConfig::default()
    };
    cfg.pretrain.epochs = 80;
    cfg.pretrain.tasks_per_world = 15;
    cfg.pretrain.hidden_dim = 8;
    cfg
}

#[test]
fn frozen_run_equals_a_plain_evaluation_pass() {
    let cfg = ExperimentConfig { method: Method::None, ..small() };
    let out = run::run(&cfg, 5).unwrap();
    let params = run::pretrain(&cfg, 5).unwrap().policy.clone();
    let suite = run::test_suite(&cfg, 5).unwrap();
    let successes = suite
        .episodes
        .iter()
        .filter(|(w, task)| {
            let world = &suite.worlds[*w];
            envgraph::is_success(world, policy::rollout(&params, world, task).final_node, task)
        })
        .count();
    assert_eq!(out.summary.report.sr, 100.0 * successes as f64 / 20.0);
    assert!(out.records.iter().all(|r| r.source.is_none() && !r.updated));
}

#[test]
fn logs_round_trip_and_report_matches_records() {
    let cfg = small();
    let out = run::run(&cfg, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    assert_eq!(run::read_records(dir.path()).unwrap(), out.records);
    assert_eq!(run::read_summary(dir.path()).unwrap(), out.summary);
    let summaries: Vec<_> = out.records.iter().map(|r| r.summary()).collect();
    assert_eq!(metrics::aggregate(&summaries), out.summary.report);
    for r in &out.records {
        assert_eq!(r.schema_version, 1);
        assert_eq!(r.source.map(|s| s.routed() == navadapt_core::sal::Source::Human), Some(r.mean_entropy > cfg.delta));
    }
    let cfg_back = ExperimentConfig::load(&dir.path().join(run::CONFIG_FILE)).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn runs_are_deterministic() {
    let cfg = ExperimentConfig { method: Method::EntropyMinAl, sampling: Some(Sampling::RandomK), ..small() };
    let a = run::run(&cfg, 5).unwrap();
    let b = run::run(&cfg, 5).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn k_sampling_matches_the_uncertainty_budget() {
    let base = ExperimentConfig { method: Method::MeoAl, ..small() };
    let unc = run::run(&base, 5).unwrap();
    let budget = unc.records.iter().filter(|r| r.source == Some(LabelSource::Human)).count();
    for s in [Sampling::RandomK, Sampling::ConsecutiveK] {
        let out = run::run(&ExperimentConfig { sampling: Some(s), ..base.clone() }, 5).unwrap();
        assert_eq!(out.summary.sampling_k, Some(budget));
        let asked: Vec<u64> = out.records.iter().filter(|r| r.source == Some(LabelSource::Human)).map(|r| r.episode_id).collect();
        assert_eq!(asked.len(), budget);
        if s == Sampling::ConsecutiveK {
            assert_eq!(asked, (0..budget as u64).collect::<Vec<_>>());
        }
    }
    let all = run::run(&ExperimentConfig { sampling: Some(Sampling::All), ..base }, 5).unwrap();
    assert_eq!(all.summary.report.active_episode_ratio, 1.0);
}

#[test]
fn feedback_plans() {
    assert_eq!(feedback_plan(Sampling::Uncertainty, 3, 10, 0), None);
    assert_eq!(feedback_plan(Sampling::ConsecutiveK, 3, 10, 0).unwrap().into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(feedback_plan(Sampling::All, 0, 4, 0).unwrap().len(), 4);
    let r = feedback_plan(Sampling::RandomK, 4, 10, 7).unwrap();
    assert_eq!(r.len(), 4);
    assert!(r.iter().all(|&i| i < 10));
    assert_eq!(r, feedback_plan(Sampling::RandomK, 4, 10, 7).unwrap());
    assert_eq!(feedback_plan(Sampling::RandomK, 40, 10, 7).unwrap().len(), 10);
}

#[test]
fn entropy_min_updates_every_episode_without_feedback() {
    let out = run::run(&ExperimentConfig { method: Method::EntropyMin, ..small() }, 5).unwrap();
    assert!(out.records.iter().all(|r| r.updated && r.source.is_none() && r.label_used.is_none()));
}

#[test]
fn degenerate_sweep_is_one_row_over_all_seeds() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let table = sweep::sweep(&cfg, &Grid::from_specs(&["lambda=0.0"]).unwrap(), Some(dir.path())).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].runs.len(), 2);
    assert!(dir.path().join("lambda=0.0").join("seed-5").join(run::EPISODES_FILE).is_file());
    let csv_path = dir.path().join("sweep.csv");
    table.write_csv(&csv_path).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("schema_version,lambda,seeds,sr_mean,sr_std"));
}

#[test]
fn lambda_one_rows_are_flagged() {
    let cfg = ExperimentConfig { seeds: vec![5], ..small() };
    let table = sweep::sweep(&cfg, &Grid::from_specs(&["lambda=0.5,1.0"]).unwrap(), None).unwrap();
    assert_eq!(table.rows.iter().map(|r| r.zero_gradient).collect::<Vec<_>>(), vec![false, true]);
    // The mixture loss is identically zero, so the policy never moves.
    let frozen = run::run(&ExperimentConfig { method: Method::None, ..cfg.clone() }, 5).unwrap();
    let one = run::run(&ExperimentConfig { lambda: 1.0, method: Method::MeoAl, ..cfg }, 5).unwrap();
    assert_eq!(one.summary.report.sr, frozen.summary.report.sr);
}

#[test]
fn sweep_rejects_unknown_fields() {
    let err = sweep::sweep(&small(), &Grid::from_specs(&["shift.fog=0.1"]).unwrap(), None).unwrap_err();
    assert!(matches!(err, HarnessError::UnknownField(ref k) if k == "shift.fog"));
}

#[test]
fn report_aggregates_seeds_and_writes_artifacts() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::None, Method::Atena] {
        for &seed in &cfg.seeds {
            let c = ExperimentConfig { method, ..cfg.clone() };
            run::run(&c, seed).unwrap().write(&run::run_dir(dir.path(), &c, seed)).unwrap();
        }
    }
    let lam = ExperimentConfig { lambda: 0.8, ..cfg.clone() };
    run::run(&lam, 5).unwrap().write(&dir.path().join("lam08").join("seed-5")).unwrap();

    let entries = report::collect_runs(dir.path()).unwrap();
    assert_eq!(entries.len(), 5);
    let rep = report::build(&entries);
    assert_eq!(rep.groups.len(), 3);
    let none = rep.groups.iter().find(|g| g.method == "none").unwrap();
    assert_eq!(none.seeds.len(), 2);
    let srs: Vec<f64> = entries.iter().filter(|e| e.summary.method == Method::None).map(|e| e.summary.report.sr).collect();
    assert!((none.sr.mean - (srs[0] + srs[1]) / 2.0).abs() < 1e-12);
    assert_eq!(rep.lambda_curve.len(), 2);
    assert!(rep.groups.iter().any(|g| g.label.contains("lambda=0.8")));

    let text = report::render_text(&rep);
    assert!(text.contains("SR") && text.contains("confusion"));
    let out = tempfile::tempdir().unwrap();
    report::write_artifacts(&rep, out.path()).unwrap();
    for f in [report::SUMMARY_CSV, report::SUMMARY_JSON, report::LAMBDA_CSV, report::CONFUSION_CSV] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.path().join(report::SUMMARY_CSV)).unwrap().lines().count(), 4);
}

#[test]
fn single_run_report_matches_its_run_report() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let out = run::run(&cfg, 5).unwrap();
    out.write(dir.path()).unwrap();
    let rep = report::build(&report::collect_runs(dir.path()).unwrap());
    assert_eq!(rep.groups.len(), 1);
    let g = &rep.groups[0];
    assert_eq!(g.sr.mean, out.summary.report.sr);
    assert_eq!(g.sr.std, 0.0);
    assert_eq!(g.spl.mean, out.summary.report.spl);
    assert_eq!(g.confusion, out.summary.report.confusion);
}

#[test]
fn checkpoint_replaces_pretraining() {
    let cfg = ExperimentConfig { seeds: vec![5], ..small() };
    let p = run::pretrain(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    p.policy.write_checkpoint(5, fs::File::create(&path).unwrap()).unwrap();
    let from_ckpt = ExperimentConfig { policy_checkpoint: Some(path), ..cfg.clone() };
    let a = run::run(&from_ckpt, 5).unwrap();
    let b = run::run(&cfg, 5).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary.bc_agreement, None);

    let wrong = ExperimentConfig { world: envgraph::WorldParams { feature_dim: 6, ..cfg.world.clone() }, ..from_ckpt };
    assert!(matches!(run::run(&wrong, 5), Err(HarnessError::Config(_))));
}

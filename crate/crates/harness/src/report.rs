//! Summaries over finished run logs: per-method tables, lambda curves and
//! the self-prediction confusion matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use navadapt_core::metrics::Confusion;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::HarnessError;
use crate::run::{self, RunSummary, CONFIG_FILE, REPORT_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

/// One finished run found on disk.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
}

/// Every directory under `root` (inclusive) holding a run report.
pub fn collect_runs(root: &Path) -> Result<Vec<RunEntry>, HarnessError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(REPORT_FILE).is_file() {
            let summary = run::read_summary(&dir)?;
            let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
            out.push(RunEntry { dir: dir.clone(), config, summary });
        }
        let listing = fs::read_dir(&dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e.to_string()))?;
        for entry in listing.flatten() {
            if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                stack.push(entry.path());
            }
        }
    }
    out.sort_by(|a, b| a.dir.cmp(&b.dir));
    Ok(out)
}

/// Runs of one configuration, aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: String,
    pub method: String,
    pub sampling: Option<String>,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub sr: MeanStd,
    pub osr: MeanStd,
    pub spl: MeanStd,
    pub tl: MeanStd,
    pub ne: MeanStd,
    /// Percent of episodes answered by a human.
    pub active_episodes: MeanStd,
    /// Percent of steps inside human-answered episodes.
    pub active_steps: MeanStd,
    pub confusion: Confusion,
    pub self_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub label: String,
    pub lambda: f64,
    pub sr: MeanStd,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub groups: Vec<GroupRow>,
    /// Only filled when some method was run at more than one lambda.
    pub lambda_curve: Vec<LambdaPoint>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Config fields that say nothing about the experimental condition.
const IGNORED: [&str; 5] = ["seeds", "out_dir", "method", "sampling", "sampling_k"];

fn condition(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg).expect("config serializes"), &mut flat);
    flat.retain(|k, _| !IGNORED.contains(&k.as_str()));
    flat
}

pub fn build(entries: &[RunEntry]) -> Report {
    // Group by method, sampling and every other config field.
    let mut groups: BTreeMap<(String, Option<String>, Vec<(String, String)>), Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        let key = (
            e.summary.method.name().to_string(),
            e.summary.sampling.map(|s| s.name().to_string()),
            condition(&e.config).into_iter().collect::<Vec<_>>(),
        );
        groups.entry(key).or_default().push(e);
    }
    // Fields that differ between groups go into the labels.
    let mut varying = BTreeSet::new();
    let conds: Vec<&Vec<(String, String)>> = groups.keys().map(|k| &k.2).collect();
    if let Some(first) = conds.first() {
        for c in &conds[1..] {
            for ((k, a), (_, b)) in first.iter().zip(c.iter()) {
                if a != b {
                    varying.insert(k.clone());
                }
            }
        }
    }

    let mut rows = Vec::new();
    for ((method, sampling, cond), runs) in &groups {
        let mut label = match sampling {
            Some(s) => format!("{method}-{s}"),
            None => method.clone(),
        };
        for (k, v) in cond.iter().filter(|(k, _)| varying.contains(k)) {
            let _ = write!(label, " {k}={v}");
        }
        let col = |f: &dyn Fn(&RunSummary) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
        let mut confusion = Confusion::default();
        for r in runs {
            let c = r.summary.report.confusion;
            confusion.tp += c.tp;
            confusion.fp += c.fp;
            confusion.tn += c.tn;
            confusion.fn_ += c.fn_;
        }
        rows.push(GroupRow {
            label,
            method: method.clone(),
            sampling: sampling.clone(),
            lambda: runs[0].summary.lambda,
            seeds: runs.iter().map(|r| r.summary.seed).collect(),
            sr: col(&|s| s.report.sr),
            osr: col(&|s| s.report.osr),
            spl: col(&|s| s.report.spl),
            tl: col(&|s| s.report.mean_tl),
            ne: col(&|s| s.report.mean_ne),
            active_episodes: col(&|s| 100.0 * s.report.active_episode_ratio),
            active_steps: col(&|s| 100.0 * s.report.active_step_ratio),
            self_accuracy: confusion.accuracy(),
            confusion,
        });
    }

    let mut lambdas: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for r in &rows {
        lambdas.entry(&r.method).or_default().insert(r.lambda.to_bits());
    }
    let lambda_curve = rows
        .iter()
        .filter(|r| lambdas[r.method.as_str()].len() > 1)
        .map(|r| LambdaPoint {
            label: r.label.clone(),
            lambda: r.lambda,
            sr: r.sr,
            seeds: r.seeds.len(),
        })
        .collect();
    Report { schema_version: SCHEMA_VERSION, groups: rows, lambda_curve }
}

pub fn render_text(report: &Report) -> String {
    let mut s = String::new();
    let width = report.groups.iter().map(|g| g.label.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(
        s,
        "{:width$}  {:>5}  {:>15}  {:>15}  {:>15}  {:>13}  {:>13}  {:>15}  {:>15}",
        "method", "runs", "SR", "OSR", "SPL", "TL", "NE", "Active% (ep)", "Active% (step)"
    );
    for g in &report.groups {
        let _ = writeln!(
            s,
            "{:width$}  {:>5}  {:>15}  {:>15}  {:>15}  {:>13}  {:>13}  {:>15}  {:>15}",
            g.label,
            g.seeds.len(),
            g.sr.to_string(),
            g.osr.to_string(),
            g.spl.to_string(),
            g.tl.to_string(),
            g.ne.to_string(),
            g.active_episodes.to_string(),
            g.active_steps.to_string(),
        );
    }
    let with_head: Vec<&GroupRow> = report.groups.iter().filter(|g| g.confusion.total() > 0).collect();
    if !with_head.is_empty() {
        let _ = writeln!(s, "\nself-prediction confusion (rows: predicted, columns: actual)");
        for g in with_head {
            let c = g.confusion;
            let _ = writeln!(s, "{}", g.label);
            let _ = writeln!(s, "               actual success  actual failure");
            let _ = writeln!(s, "  pred success  {:>14}  {:>14}", c.tp, c.fp);
            let _ = writeln!(s, "  pred failure  {:>14}  {:>14}", c.fn_, c.tn);
            if let Some(a) = g.self_accuracy {
                let _ = writeln!(s, "  accuracy {:.2}%", 100.0 * a);
            }
        }
    }
    if !report.lambda_curve.is_empty() {
        let _ = writeln!(s, "\nlambda curve");
        for p in &report.lambda_curve {
            let _ = writeln!(s, "  {:<width$}  lambda {:.2}  SR {}", p.label, p.lambda, p.sr);
        }
    }
    s
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LAMBDA_CSV: &str = "lambda_curve.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";

fn csv_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(path.display().to_string(), e.to_string())
}

/// Writes the summary table, lambda curve and confusion matrices into `dir`.
pub fn write_artifacts(report: &Report, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| csv_err(dir, e))?;

    let path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["schema_version".to_string(), "label".into(), "method".into(), "sampling".into(), "lambda".into(), "runs".into()];
    for m in ["sr", "osr", "spl", "tl", "ne", "active_episodes", "active_steps"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    header.push("self_accuracy".into());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    for g in &report.groups {
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            g.label.clone(),
            g.method.clone(),
            g.sampling.clone().unwrap_or_default(),
            g.lambda.to_string(),
            g.seeds.len().to_string(),
        ];
        for m in [g.sr, g.osr, g.spl, g.tl, g.ne, g.active_episodes, g.active_steps] {
            row.push(m.mean.to_string());
            row.push(m.std.to_string());
        }
        row.push(g.self_accuracy.map(|a| a.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| csv_err(&path, e))?;

    let path = dir.join(CONFUSION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["label", "tp", "fp", "tn", "fn", "accuracy"]).map_err(|e| csv_err(&path, e))?;
    for g in report.groups.iter().filter(|g| g.confusion.total() > 0) {
        let c = g.confusion;
        let row = [
            g.label.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            g.self_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ];
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| csv_err(&path, e))?;

    if !report.lambda_curve.is_empty() {
        let path = dir.join(LAMBDA_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["label", "lambda", "sr_mean", "sr_std", "runs"]).map_err(|e| csv_err(&path, e))?;
        for p in &report.lambda_curve {
            let row = [p.label.clone(), p.lambda.to_string(), p.sr.mean.to_string(), p.sr.std.to_string(), p.seeds.to_string()];
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| csv_err(&path, e))?;
    }

    let path = dir.join(SUMMARY_JSON);
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(|e| csv_err(&path, e))
}

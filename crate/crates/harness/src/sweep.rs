//! Grid sweeps: the cross product of parameter values, run once per seed
//! and aggregated into one CSV row per cell.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, Method, SCHEMA_VERSION};
use crate::error::HarnessError;
use crate::report::MeanStd;
use crate::run::{self, RunSummary};

/// Ordered parameter axes. Keys are dotted config paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<(String, Vec<Value>)>,
}

impl Grid {
    /// Parses `key=v1,v2,...` or `key=[v1, v2]`. Values are JSON; bare words
    /// are strings.
    pub fn parse_axis(spec: &str) -> Result<(String, Vec<Value>), HarnessError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected key=v1,v2,..., got {spec:?}")))?;
        let raw = raw.trim();
        let values = if raw.starts_with('[') {
            serde_json::from_str::<Vec<Value>>(raw).map_err(|e| HarnessError::Config(format!("{key}: {e}")))?
        } else {
            raw.split(',')
                .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string())))
                .collect()
        };
        if values.is_empty() {
            return Err(HarnessError::Config(format!("{key}: empty value list")));
        }
        Ok((key.trim().to_string(), values))
    }

    pub fn from_specs<S: AsRef<str>>(specs: &[S]) -> Result<Self, HarnessError> {
        let axes = specs.iter().map(|s| Self::parse_axis(s.as_ref())).collect::<Result<_, _>>()?;
        Ok(Self { axes })
    }

    /// A JSON object of key → array of values. Keys are taken in sorted
    /// order.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let map: std::collections::BTreeMap<String, Vec<Value>> =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("grid: {e}")))?;
        Ok(Self { axes: map.into_iter().collect() })
    }

    pub fn keys(&self) -> Vec<&str> {
        self.axes.iter().map(|(k, _)| k.as_str()).collect()
    }

    /// All value combinations, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<Value>> {
        let mut cells = vec![Vec::new()];
        for (_, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push(v.clone());
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<Value>,
    pub runs: Vec<RunSummary>,
    pub sr: MeanStd,
    pub osr: MeanStd,
    pub spl: MeanStd,
    pub tl: MeanStd,
    pub ne: MeanStd,
    pub active_episodes: MeanStd,
    pub active_steps: MeanStd,
    pub self_accuracy: Option<MeanStd>,
    /// lambda = 1 under a mixture-entropy method: every loss is identically
    /// zero, so the policy never moves.
    pub zero_gradient: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub keys: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

fn cell_config(base: &ExperimentConfig, keys: &[&str], values: &[Value]) -> Result<ExperimentConfig, HarnessError> {
    // Apply everything on the raw document and validate once, so that
    // combinations like method + sampling can be set in either order.
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for (key, value) in keys.iter().zip(values) {
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| HarnessError::UnknownField(key.to_string()))?;
        }
        *slot = value.clone();
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Directory name for a cell, e.g. `lambda=0.4,method=atena`.
fn cell_name(keys: &[&str], values: &[Value]) -> String {
    let parts: Vec<String> = keys
        .iter()
        .zip(values)
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect();
    if parts.is_empty() {
        "base".into()
    } else {
        parts.join(",")
    }
}

/// Runs every cell of `grid` for every seed in `base.seeds`, in parallel.
/// When `out` is given each run's log is written under
/// `<out>/<cell>/seed-<n>`.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, out: Option<&Path>) -> Result<SweepTable, HarnessError> {
    let keys = grid.keys();
    for key in &keys {
        if base.get_value(key).is_none() {
            return Err(HarnessError::UnknownField(key.to_string()));
        }
    }
    let cells = grid.cells();
    let configs = cells
        .iter()
        .map(|values| cell_config(base, &keys, values))
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| base.seeds.iter().map(move |&s| (c, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let output = run::run(&configs[c], seed)?;
            if let Some(out) = out {
                let dir: PathBuf = out.join(cell_name(&keys, &cells[c])).join(format!("seed-{seed}"));
                output.write(&dir)?;
            }
            Ok((c, output.summary))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut per_cell: Vec<Vec<RunSummary>> = vec![Vec::new(); cells.len()];
    for (c, summary) in results {
        per_cell[c].push(summary);
    }
    let rows = per_cell
        .into_iter()
        .zip(cells)
        .zip(&configs)
        .map(|((runs, params), cfg)| {
            let col = |f: &dyn Fn(&RunSummary) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.report.self_accuracy).collect();
            SweepRow {
                params,
                sr: col(&|s| s.report.sr),
                osr: col(&|s| s.report.osr),
                spl: col(&|s| s.report.spl),
                tl: col(&|s| s.report.mean_tl),
                ne: col(&|s| s.report.mean_ne),
                active_episodes: col(&|s| 100.0 * s.report.active_episode_ratio),
                active_steps: col(&|s| 100.0 * s.report.active_step_ratio),
                self_accuracy: (!accs.is_empty()).then(|| MeanStd::of(&accs)),
                zero_gradient: cfg.lambda == 1.0 && matches!(cfg.method, Method::MeoAl | Method::Atena),
                runs,
            }
        })
        .collect();
    Ok(SweepTable {
        keys: keys.into_iter().map(String::from).collect(),
        seeds: base.seeds.clone(),
        rows,
    })
}

impl SweepTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["schema_version".to_string()];
        h.extend(self.keys.iter().cloned());
        h.push("seeds".into());
        for m in ["sr", "osr", "spl", "tl", "ne", "active_episodes", "active_steps", "self_accuracy"] {
            h.push(format!("{m}_mean"));
            h.push(format!("{m}_std"));
        }
        h.push("mean_sampling_k".into());
        h.push("zero_gradient".into());
        h
    }

    pub fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![SCHEMA_VERSION.to_string()];
                row.extend(r.params.iter().map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                }));
                row.push(r.runs.len().to_string());
                for m in [r.sr, r.osr, r.spl, r.tl, r.ne, r.active_episodes, r.active_steps] {
                    row.push(m.mean.to_string());
                    row.push(m.std.to_string());
                }
                match r.self_accuracy {
                    Some(m) => {
                        row.push(m.mean.to_string());
                        row.push(m.std.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
                let ks: Vec<f64> = r.runs.iter().filter_map(|s| s.sampling_k.map(|k| k as f64)).collect();
                row.push(if ks.is_empty() { String::new() } else { MeanStd::of(&ks).mean.to_string() });
                row.push(r.zero_gradient.to_string());
                row
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let err = |e: csv::Error| HarnessError::Io(path.display().to_string(), e.to_string());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e.to_string()))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(self.header()).map_err(err)?;
        for r in self.records() {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))
    }

    /// Fixed-width rendering for the terminal.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            let params: Vec<String> = self.keys.iter().zip(&r.params).map(|(k, v)| format!("{k}={v}")).collect();
            let flag = if r.zero_gradient { "  [zero gradient]" } else { "" };
            s.push_str(&format!(
                "{:>3}  {:<40}  SR {}  OSR {}  SPL {}  Active% {}{flag}\n",
                i,
                params.join(" "),
                r.sr,
                r.osr,
                r.spl,
                r.active_episodes
            ));
        }
        s
    }
}

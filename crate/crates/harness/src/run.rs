//! One adaptation run: pretrain (or load), build the shifted test suite,
//! stream episodes through the configured method, and log everything.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use navadapt_core::envgraph::{self, GraphWorld, NodeId, Task};
use navadapt_core::metrics::{self, EpisodeMetrics, EpisodeSummary, RunReport};
use navadapt_core::oracles::{FeedbackOracle, GroundTruthOracle};
use navadapt_core::policy::{self, PolicyDims, PolicyParams};
use navadapt_core::rng;
use navadapt_core::sal::{AdaptationState, EpisodeRecord, LabelSource};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, Sampling, SCHEMA_VERSION};
use crate::error::HarnessError;
use crate::methods;

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
/// Wall-clock data; the only file allowed to differ between repeated runs.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub policy: PolicyParams,
    /// Argmax agreement with the expert on the training demonstrations.
    pub agreement: f64,
    pub final_loss: f64,
}

fn cache() -> &'static Mutex<HashMap<String, Arc<OnceLock<Arc<Pretrained>>>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<OnceLock<Arc<Pretrained>>>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

pub fn seen_worlds(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<GraphWorld>, HarnessError> {
    (0..cfg.n_seen_worlds)
        .map(|i| Ok(envgraph::generate_world_with(&cfg.world, rng::derive_seed(seed, "seen_world", i as u64))?))
        .collect()
}

/// Directory for cross-process pretrain results, if set.
pub const PRETRAIN_CACHE_ENV: &str = "NAVADAPT_PRETRAIN_CACHE";

#[derive(Serialize, Deserialize)]
struct CachedMeta {
    key: String,
    agreement: f64,
    final_loss: f64,
}

fn disk_cache_path(key: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(PRETRAIN_CACHE_ENV)?;
    Some(PathBuf::from(dir).join(format!("bc-{:016x}", rng::derive_seed(0, key, 0))))
}

fn load_cached(key: &str) -> Option<Pretrained> {
    let base = disk_cache_path(key)?;
    let meta: CachedMeta = serde_json::from_str(&fs::read_to_string(base.with_extension("json")).ok()?).ok()?;
    if meta.key != key {
        return None;
    }
    let file = File::open(base.with_extension("ckpt")).ok()?;
    let (policy, _) = PolicyParams::read_checkpoint(std::io::BufReader::new(file)).ok()?;
    Some(Pretrained { policy, agreement: meta.agreement, final_loss: meta.final_loss })
}

fn store_cached(key: &str, seed: u64, p: &Pretrained) {
    let Some(base) = disk_cache_path(key) else { return };
    let write = || -> std::io::Result<()> {
        if let Some(dir) = base.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        p.policy.write_checkpoint(seed, &mut buf).map_err(std::io::Error::other)?;
        // Write then rename so concurrent readers never see a partial file.
        let tmp = base.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, buf)?;
        fs::rename(&tmp, base.with_extension("ckpt"))?;
        let meta = CachedMeta { key: key.to_string(), agreement: p.agreement, final_loss: p.final_loss };
        fs::write(&tmp, serde_json::to_vec(&meta).expect("meta serializes"))?;
        fs::rename(&tmp, base.with_extension("json"))
    };
    if let Err(e) = write() {
        tracing::warn!(error = %e, "could not write pretrain cache");
    }
}

/// Behavior cloning on the seen worlds. Results are memoized per process
/// on everything that influences them, so sweeps pretrain once per seed,
/// and optionally on disk under `$NAVADAPT_PRETRAIN_CACHE`.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<Arc<Pretrained>, HarnessError> {
    let key = serde_json::to_string(&(&cfg.world, &cfg.task, &cfg.pretrain, cfg.n_seen_worlds, seed)).expect("key serializes");
    let slot = cache().lock().unwrap().entry(key.clone()).or_default().clone();
    if let Some(p) = slot.get() {
        return Ok(p.clone());
    }
    if let Some(p) = load_cached(&key) {
        return Ok(slot.get_or_init(|| Arc::new(p)).clone());
    }
    let worlds = seen_worlds(cfg, seed)?;
    let demos = policy::demonstrations_for(&worlds, &cfg.task, cfg.pretrain.tasks_per_world, rng::derive_seed(seed, "bc_demos", 0))?;
    let dims = PolicyDims::new(cfg.pretrain.hidden_dim, cfg.world.feature_dim);
    let outcome = policy::pretrain_bc(&demos, dims, &cfg.pretrain, rng::derive_seed(seed, "init", 0));
    let agreement = policy::expert_agreement(&outcome.params, &demos);
    tracing::debug!(seed, agreement, demos = demos.len(), "pretrained");
    let p = Arc::new(Pretrained {
        final_loss: *outcome.loss_history.last().unwrap_or(&f64::NAN),
        policy: outcome.params,
        agreement,
    });
    store_cached(&key, seed, &p);
    Ok(slot.get_or_init(|| p).clone())
}

fn initial_policy(cfg: &ExperimentConfig, seed: u64) -> Result<(PolicyParams, Option<f64>), HarnessError> {
    match &cfg.policy_checkpoint {
        Some(path) => {
            let file = File::open(path).map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))?;
            let (params, _) = PolicyParams::read_checkpoint(std::io::BufReader::new(file))?;
            if params.dims().feature != cfg.world.feature_dim {
                return Err(HarnessError::Config(format!(
                    "checkpoint feature dim {} != world feature dim {}",
                    params.dims().feature,
                    cfg.world.feature_dim
                )));
            }
            Ok((params, None))
        }
        None => {
            let p = pretrain(cfg, seed)?;
            Ok((p.policy.clone(), Some(p.agreement)))
        }
    }
}

/// Shifted test worlds and their tasks, in episode order.
#[derive(Debug, Clone)]
pub struct TestSuite {
    pub worlds: Vec<GraphWorld>,
    /// `(world index, task)` per episode; world-major.
    pub episodes: Vec<(usize, Task)>,
}

pub fn test_suite(cfg: &ExperimentConfig, seed: u64) -> Result<TestSuite, HarnessError> {
    let mut worlds = Vec::with_capacity(cfg.n_test_worlds);
    let mut episodes = Vec::with_capacity(cfg.total_episodes());
    for w in 0..cfg.n_test_worlds {
        let base = envgraph::generate_world_with(&cfg.world, rng::derive_seed(seed, "test_world", w as u64))?;
        let world = envgraph::apply_shift(&base, &cfg.shift, rng::derive_seed(seed, "shift", w as u64))?;
        for e in 0..cfg.episodes_per_world {
            let id = (w * cfg.episodes_per_world + e) as u64;
            episodes.push((w, envgraph::sample_task(&world, &cfg.task, rng::derive_seed(seed, "test_task", id))?));
        }
        worlds.push(world);
    }
    Ok(TestSuite { worlds, episodes })
}

/// One line of `episodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub episode_id: u64,
    pub seed: u64,
    pub world: usize,
    /// `None` for methods that never ask for feedback.
    pub source: Option<LabelSource>,
    pub mean_entropy: f64,
    pub true_success: bool,
    pub label_used: Option<bool>,
    pub self_prediction: Option<bool>,
    pub l_mix: f64,
    pub l_self: f64,
    pub l_total: f64,
    /// `(node, selected action)` per decision step.
    pub trajectory: Vec<(NodeId, usize)>,
    pub final_node: NodeId,
    pub step_entropies: Vec<f64>,
    pub step_mix_entropies: Vec<f64>,
    pub tl: f64,
    pub ne: f64,
    pub oracle_success: bool,
    pub spl_term: f64,
    pub truncated: bool,
    pub updated: bool,
}

impl LogRecord {
    fn new(rec: EpisodeRecord, method: Method, seed: u64, world_index: usize, m: EpisodeMetrics) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            episode_id: rec.episode_id,
            seed,
            world: world_index,
            source: method.uses_feedback().then_some(rec.source),
            mean_entropy: rec.mean_entropy,
            true_success: rec.true_success,
            label_used: rec.label_used,
            self_prediction: rec.self_prediction,
            l_mix: rec.l_mix,
            l_self: rec.l_self,
            l_total: rec.l_total,
            trajectory: rec.trajectory,
            final_node: rec.final_node,
            step_entropies: rec.step_entropies,
            step_mix_entropies: rec.step_mix_entropies,
            tl: m.tl,
            ne: m.ne,
            oracle_success: m.oracle_success,
            spl_term: m.spl_term,
            truncated: rec.truncated,
            updated: rec.updated,
        }
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            metrics: EpisodeMetrics {
                tl: self.tl,
                ne: self.ne,
                success: self.true_success,
                oracle_success: self.oracle_success,
                spl_term: self.spl_term,
            },
            steps: self.trajectory.len(),
            source: self.source,
            self_prediction: self.self_prediction,
        }
    }
}

/// `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub code_version: String,
    pub method: Method,
    pub sampling: Option<Sampling>,
    /// Feedback budget for the k-sampling baselines.
    pub sampling_k: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub bc_agreement: Option<f64>,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    pub records: Vec<LogRecord>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timing {
    pub setup_ms: f64,
    pub episodes_ms: f64,
    pub mean_episode_ms: f64,
}

/// Which episodes get human feedback under a k-budget sampling scheme;
/// `None` means route by uncertainty.
pub fn feedback_plan(sampling: Sampling, k: usize, total: usize, seed: u64) -> Option<BTreeSet<u64>> {
    match sampling {
        Sampling::Uncertainty => None,
        Sampling::All => Some((0..total as u64).collect()),
        Sampling::ConsecutiveK => Some((0..k.min(total) as u64).collect()),
        Sampling::RandomK => {
            let mut r = rng::stream(seed, "sampling", 0);
            Some(index::sample(&mut r, total, k.min(total)).into_iter().map(|i| i as u64).collect())
        }
    }
}

/// Called after every episode with the logged record and its world.
pub type Observer<'a> = dyn FnMut(&LogRecord, &GraphWorld, &RunReport) + 'a;

/// Runs with the seeded ground-truth oracle.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput, HarnessError> {
    let mut oracle = GroundTruthOracle::new(cfg.noise_rate, rng::derive_seed(seed, "oracle", 0));
    run_with(cfg, seed, &mut oracle, &mut |_, _, _| {})
}

pub fn run_with(cfg: &ExperimentConfig, seed: u64, oracle: &mut dyn FeedbackOracle, observer: &mut Observer<'_>) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let (policy, bc_agreement) = initial_policy(cfg, seed)?;
    let suite = test_suite(cfg, seed)?;
    let total = suite.episodes.len();

    let sampling = cfg.method.uses_feedback().then(|| cfg.effective_sampling());
    let k = match sampling {
        Some(Sampling::RandomK | Sampling::ConsecutiveK) => Some(match cfg.sampling_k {
            Some(k) => k,
            None => reference_budget(cfg, seed)?,
        }),
        _ => None,
    };
    let plan = sampling.and_then(|s| feedback_plan(s, k.unwrap_or(0), total, seed));

    let mut state = AdaptationState::new(policy, cfg.hyperparameters())?;
    let setup = t0.elapsed();
    let t1 = Instant::now();
    let mut records = Vec::with_capacity(total);
    let mut summaries = Vec::with_capacity(total);
    for (id, (w, task)) in suite.episodes.iter().enumerate() {
        let id = id as u64;
        let world = &suite.worlds[*w];
        let feedback = plan.as_ref().map(|p| p.contains(&id));
        let rec = methods::run_episode(cfg.method, &mut state, world, task, id, feedback, oracle)?;
        let m = metrics::episode_metrics(world, task, &rec.path());
        let log = LogRecord::new(rec, cfg.method, seed, *w, m);
        summaries.push(log.summary());
        observer(&log, world, &metrics::aggregate(&summaries));
        records.push(log);
    }
    let elapsed = t1.elapsed();
    let report = metrics::aggregate(&summaries);
    tracing::info!(method = cfg.method.name(), seed, sr = report.sr, "run finished");
    Ok(RunOutput {
        config: cfg.clone(),
        summary: RunSummary {
            schema_version: SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            method: cfg.method,
            sampling,
            sampling_k: k,
            lambda: cfg.lambda,
            seed,
            bc_agreement,
            report,
        },
        records,
        timing: Timing {
            setup_ms: setup.as_secs_f64() * 1e3,
            episodes_ms: elapsed.as_secs_f64() * 1e3,
            mean_episode_ms: elapsed.as_secs_f64() * 1e3 / total.max(1) as f64,
        },
    })
}

/// Human-episode count of the same config under uncertainty sampling.
fn reference_budget(cfg: &ExperimentConfig, seed: u64) -> Result<usize, HarnessError> {
    let reference = ExperimentConfig { sampling: Some(Sampling::Uncertainty), sampling_k: None, ..cfg.clone() };
    let out = run(&reference, seed)?;
    Ok(out.records.iter().filter(|r| r.source == Some(LabelSource::Human)).count())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(path.display().to_string(), e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

impl RunOutput {
    /// Writes the run log into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(EPISODES_FILE);
        let mut out = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.write_all(b"\n").map_err(|e| io_err(&path, e))?;
        }
        out.flush().map_err(|e| io_err(&path, e))?;
        let report = serde_json::to_string_pretty(&self.summary).expect("report serializes");
        write_file(&dir.join(REPORT_FILE), report.as_bytes())?;
        write_file(&dir.join(CONFIG_FILE), self.config.to_json_pretty().as_bytes())?;
        let timing = serde_json::to_string_pretty(&self.timing).expect("timing serializes");
        write_file(&dir.join(TIMING_FILE), timing.as_bytes())
    }
}

/// Conventional location for a run: `<out>/<method>[-<sampling>]/seed-<n>`.
pub fn run_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    let mut name = cfg.method.name().to_string();
    if let Some(s) = cfg.sampling {
        name = format!("{name}-{}", s.name());
    }
    out.join(name).join(format!("seed-{seed}"))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, HarnessError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn read_records(dir: &Path) -> Result<Vec<LogRecord>, HarnessError> {
    let path = dir.join(EPISODES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

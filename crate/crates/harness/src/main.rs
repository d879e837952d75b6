use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use navadapt_harness::report;
use navadapt_harness::run;
use navadapt_harness::serve;
use navadapt_harness::sweep::{self, Grid};
use navadapt_harness::{ExperimentConfig, OracleKind};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "navadapt", version, about = "Test-time adaptation lab for instruction-following graph navigation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config document; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config field, e.g. `--set lambda=0.6` or
    /// `--set shift.edge_dropout=0.3`. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Behavior-clone the policy on the seen worlds and save checkpoints.
    Pretrain,
    /// Run the configured method on the shifted test suite.
    Run,
    /// Run the cross product of parameter values over all seeds.
    Sweep {
        /// Axis as `key=v1,v2,...`; repeatable.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
        /// JSON object of key -> list of values, merged after `--grid`.
        #[arg(long)]
        grid_file: Option<PathBuf>,
    },
    /// Run with a human oracle behind an HTTP interface.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Summarize run logs found under the given directories.
    Report {
        /// Directories to scan; defaults to the output directory.
        paths: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &common.set {
        cfg = cfg.with_override(assignment)?;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let done: Vec<_> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_> {
            let p = run::pretrain(cfg, seed)?;
            let path = cfg.out_dir.join(format!("policy-seed-{seed}.ckpt"));
            let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            p.policy.write_checkpoint(seed, std::io::BufWriter::new(file))?;
            Ok((seed, p.agreement, p.final_loss, path))
        })
        .collect::<Result<_>>()?;
    for (seed, agreement, loss, path) in done {
        println!("seed {seed}: expert agreement {:.2}%  final loss {loss:.4}  -> {}", 100.0 * agreement, path.display());
    }
    Ok(())
}

fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    let dirs: Vec<PathBuf> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<PathBuf> {
            let output = run::run(cfg, seed)?;
            let dir = run::run_dir(&cfg.out_dir, cfg, seed);
            output.write(&dir)?;
            Ok(dir)
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::new();
    for dir in &dirs {
        entries.extend(report::collect_runs(dir)?);
    }
    print!("{}", report::render_text(&report::build(&entries)));
    for dir in dirs {
        println!("log: {}", dir.display());
    }
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, specs: &[String], grid_file: Option<&Path>) -> Result<()> {
    let mut grid = Grid::from_specs(specs)?;
    if let Some(path) = grid_file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        grid.axes.extend(Grid::from_json(&text)?.axes);
    }
    if grid.axes.is_empty() {
        bail!("sweep needs at least one --grid axis or --grid-file");
    }
    let table = sweep::sweep(cfg, &grid, Some(&cfg.out_dir.join("runs")))?;
    let csv = cfg.out_dir.join("sweep.csv");
    table.write_csv(&csv)?;
    print!("{}", table.render_text());
    println!("table: {}", csv.display());
    Ok(())
}

fn serve_cmd(cfg: &ExperimentConfig, host: &str, port: u16) -> Result<()> {
    let mut cfg = cfg.clone();
    if cfg.oracle != OracleKind::Interactive {
        tracing::info!("serve implies oracle = interactive");
        cfg.oracle = OracleKind::Interactive;
    }
    let seed = cfg.seeds[0];
    if cfg.seeds.len() > 1 {
        tracing::info!(seed, "serve runs a single seed; pass --seed to choose");
    }
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let dir = run::run_dir(&cfg.out_dir, &cfg, seed);
    let mut handle = serve::start(&cfg, seed, addr, Some(dir.clone()))?;
    println!("listening on http://{}", handle.addr());
    let output = handle.wait_run()?;
    println!(
        "run finished: SR {:.2}  active {:.1}%  log {}",
        output.summary.report.sr,
        100.0 * output.summary.report.active_episode_ratio,
        dir.display()
    );
    println!("still serving final state; Ctrl-C to exit");
    handle.join_server();
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig, paths: &[PathBuf]) -> Result<()> {
    let paths = if paths.is_empty() { vec![cfg.out_dir.clone()] } else { paths.to_vec() };
    let mut entries = Vec::new();
    for p in &paths {
        entries.extend(report::collect_runs(p)?);
    }
    if entries.is_empty() {
        bail!("no run logs found under {:?}", paths);
    }
    let rep = report::build(&entries);
    print!("{}", report::render_text(&rep));
    let out = &paths[0];
    report::write_artifacts(&rep, out)?;
    println!("artifacts: {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Pretrain => pretrain(&cfg),
        Command::Run => run_all(&cfg),
        Command::Sweep { grid, grid_file } => sweep_cmd(&cfg, grid, grid_file.as_deref()),
        Command::Serve { port, host } => serve_cmd(&cfg, host, *port),
        Command::Report { paths } => report_cmd(&cfg, paths),
    }
}

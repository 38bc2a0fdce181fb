//! Command-line front end for experiment sweeps.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 when the sweep
//! completed but some runs failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use belucb_core::harness::{
    emit_outputs, parse_runs_csv, run_experiment, ExperimentConfig, RunStatus,
};

/// Default output directory comes from `--out`, then the config's `out_dir`,
/// then this environment variable, then `./belucb-out`.
const OUT_DIR_ENV: &str = "BELUCB_OUT_DIR";

#[derive(Parser)]
#[command(name = "belucb", about = "Batch-elimination bandit simulation sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides config and environment).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the sweep (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Parse and validate a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate the standard plots from an existing runs.csv.
    Plot {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    ExperimentConfig::from_json(&text)
}

fn resolve_out_dir(flag: Option<PathBuf>, cfg_dir: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = cfg_dir {
        return PathBuf::from(p);
    }
    if let Ok(p) = std::env::var(OUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    PathBuf::from("belucb-out")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                let points = cfg.sweep.n_agents.len() * cfg.sweep.d.len() * cfg.sweep.horizon.len();
                println!(
                    "config ok: algorithm {}, {} sweep point(s) x {} seed(s) = {} runs",
                    cfg.algorithm,
                    points,
                    cfg.seeds.len(),
                    points * cfg.seeds.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Run {
            config,
            out,
            workers,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(1);
                }
            };
            let out_dir = resolve_out_dir(out, cfg.out_dir.as_deref());
            let run = || run_experiment(&cfg);
            let results = match workers {
                Some(k) => {
                    let pool = match rayon::ThreadPoolBuilder::new()
                        .num_threads(k.max(1))
                        .build()
                    {
                        Ok(p) => p,
                        Err(e) => {
                            eprintln!("worker pool error: {e}");
                            return ExitCode::from(1);
                        }
                    };
                    pool.install(run)
                }
                None => run(),
            };
            let results = match results {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(1);
                }
            };
            let emitted = match emit_outputs(&results, &out_dir) {
                Ok(e) => e,
                Err(e) => {
                    eprintln!("output error: {e}");
                    return ExitCode::from(1);
                }
            };
            if let Some(w) = &emitted.warning {
                eprintln!("warning: {w}");
            }
            let failed = results
                .iter()
                .filter(|r| !matches!(r.status, RunStatus::Ok))
                .count();
            println!(
                "{} run(s), {} failed; wrote {}",
                results.len(),
                failed,
                emitted.runs_csv.display()
            );
            for p in &emitted.plots {
                println!("plot: {}", p.display());
            }
            if failed > 0 {
                for r in results
                    .iter()
                    .filter(|r| !matches!(r.status, RunStatus::Ok))
                {
                    if let RunStatus::Failed(msg) = &r.status {
                        eprintln!(
                            "failed: N={} d={} T={} seed={}: {msg}",
                            r.n_agents, r.d, r.horizon, r.seed
                        );
                    }
                }
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Plot { from, out } => {
            let text = match std::fs::read_to_string(&from) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", from.display());
                    return ExitCode::from(1);
                }
            };
            let results = match parse_runs_csv(&text) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("csv error: {e}");
                    return ExitCode::from(1);
                }
            };
            let out_dir = resolve_out_dir(out, None);
            if let Err(e) = std::fs::create_dir_all(&out_dir) {
                eprintln!("output error: {e}");
                return ExitCode::from(1);
            }
            let plots = belucb_core::harness::plot::standard_plots(&results);
            if plots.is_empty() {
                eprintln!("warning: not enough variation in the data to plot");
            }
            for (name, svg) in plots {
                let path = out_dir.join(&name);
                if let Err(e) = std::fs::write(&path, svg) {
                    eprintln!("output error: {e}");
                    return ExitCode::from(1);
                }
                println!("plot: {}", path.display());
            }
            ExitCode::SUCCESS
        }
    }
}

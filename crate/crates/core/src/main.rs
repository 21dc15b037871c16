use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use widenet::cli::{rank_from_run, render_report, run_ablation, run_grid, surface_from_run, DriverReport};
use widenet::config::{ExperimentConfig, RunMode};
use widenet::distributed::{run_experiment, write_file};
use widenet::Result;

#[derive(Parser)]
#[command(name = "widenet", version, about = "Wide off-policy RL agents with online feature extraction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one seed (or every configured seed) and write a run directory.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<RunMode>,
        /// Single seed; defaults to every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
    },
    /// Width/depth grid over the actor and critic blocks.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        units: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, default_value = "runs/grid")]
        out: PathBuf,
    },
    /// Full configuration plus its four ablations.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Loss surface of a finished run's first critic.
    Surface {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 25)]
        res: usize,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        /// Seed of the two random directions.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective rank of a finished run's critic features on its probe batch.
    Rank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = widenet::diagnostics::DEFAULT_DELTA)]
        delta: f64,
    },
    /// Render summary CSVs as aligned tables.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Write the default config and its annotated reference.
    Defaults {
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(config: Option<PathBuf>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn driver_status(r: &DriverReport) -> bool {
    for run in &r.runs {
        if let Err(e) = &run.outcome {
            eprintln!("{} seed {} failed: {e}", run.cell, run.seed);
        }
    }
    println!("summary written to {}", r.summary_path.display());
    match render_report(&[r.summary_path.clone()]) {
        Ok(t) => print!("{t}"),
        Err(e) => eprintln!("could not render summary: {e}"),
    }
    r.all_completed()
}

fn execute(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { config, mode, seed, out } => {
            let mut c = load(config)?;
            if let Some(m) = mode {
                c.run.mode = m;
            }
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| c.seeds.clone());
            let mut ok = true;
            for s in seeds {
                let dir = out.join(format!("seed_{s}"));
                match run_experiment(&c, s, &dir) {
                    Ok(r) => println!(
                        "seed {s}: {} gradient steps, {} env steps, best return {}, {:.1} steps/s, staleness mean {:.2} max {}",
                        r.gradient_steps,
                        r.env_steps,
                        r.max_avg_return.map_or("n/a".into(), |m| format!("{m:.1}")),
                        r.learner_rate,
                        r.mean_staleness,
                        r.max_staleness,
                    ),
                    Err(e) => {
                        eprintln!("seed {s} failed: {e}");
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Cmd::Grid { config, units, layers, out } => Ok(driver_status(&run_grid(&units, &layers, &load(config)?, &out)?)),
        Cmd::Ablation { config, out } => Ok(driver_status(&run_ablation(&load(config)?, &out)?)),
        Cmd::Surface { run, res, range, seed, out } => {
            let (grid, center) = surface_from_run(&run, res, range, seed)?;
            let path = out.unwrap_or_else(|| run.join("surface.csv"));
            grid.save(&path)?;
            println!("J_Q at center {center:e}; {} non-finite cells; written to {}", grid.nonfinite_cells, path.display());
            Ok(true)
        }
        Cmd::Rank { run, delta } => {
            println!("{}", rank_from_run(&run, delta)?);
            Ok(true)
        }
        Cmd::Report { summaries } => {
            print!("{}", render_report(&summaries)?);
            Ok(true)
        }
        Cmd::Defaults { out } => {
            write_file(&out.join("default_config.json"), &ExperimentConfig::default().to_json())?;
            write_file(&out.join("CONFIG_REFERENCE.md"), &ExperimentConfig::reference())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

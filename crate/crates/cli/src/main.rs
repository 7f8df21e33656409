use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use broncholoc::experiment::{self, ExperimentConfig, ExperimentError};
use clap::{Args, Parser, Subcommand};

/// Particle-filter endoscope localization on synthetic airways.
#[derive(Parser)]
#[command(name = "broncholoc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize along one trajectory with the configured filter mode.
    Run(Common),
    /// Compare full, no_bsa, no_dvr and dead reckoning over a suite of trees.
    Ablation(Common),
    /// Accuracy and speed across particle counts.
    Sweep(Common),
    /// Write the configured airway tree as JSON.
    GenTree(Common),
    /// Write a simulated ground-truth trajectory and its tree.
    SimTraj(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, u64)> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let seed = self.seed.unwrap_or(cfg.seed);
        Ok((cfg, seed))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, seed) = args.load()?;
            let (_, gt, out) = experiment::run(&cfg, seed)?;
            experiment::write_run(&args.out, &cfg, seed, &gt, &out)?;
            let r = &out.report;
            println!(
                "{}: {} frames, ATE {:.3} ± {:.3} mm, SR5 {:.3}, SR10 {:.3}",
                out.method.name(),
                r.frames,
                r.ate_mean,
                r.ate_std,
                r.sr5,
                r.sr10
            );
            if let Some(t) = r.throughput {
                println!("{:.1} steps/s", t.steps_per_second);
            }
        }
        Command::Ablation(args) => {
            let (cfg, seed) = args.load()?;
            let report = experiment::ablation(&cfg, seed)?;
            report.write(&args.out, &cfg)?;
            println!("{:<16}{:>12}{:>12}{:>8}{:>8}", "method", "ATE median", "ATE mean", "SR5", "SR10");
            for m in &report.methods {
                println!(
                    "{:<16}{:>12.3}{:>12.3}{:>8.3}{:>8.3}",
                    m.method, m.ate_median, m.ate_mean, m.sr5, m.sr10
                );
            }
        }
        Command::Sweep(args) => {
            let (cfg, seed) = args.load()?;
            let report = experiment::sweep(&cfg, seed)?;
            report.write(&args.out, &cfg)?;
            println!("{:>6}{:>12}{:>12}{:>12}", "N", "ATE mean", "accuracy", "steps/s");
            for r in &report.rows {
                println!(
                    "{:>6}{:>12.3}{:>11.1}%{:>12.1}",
                    r.n_particles, r.ate_mean, r.accuracy_pct, r.steps_per_second
                );
            }
        }
        Command::GenTree(args) => {
            let (cfg, seed) = args.load()?;
            let tree = experiment::gen_tree(&cfg, seed, &args.out)?;
            println!(
                "{} branches, {} leaves, max generation {}",
                tree.branches().len(),
                tree.leaves().len(),
                tree.max_generation()
            );
        }
        Command::SimTraj(args) => {
            let (cfg, seed) = args.load()?;
            let gt = experiment::sim_traj(&cfg, seed, &args.out)?;
            println!("{} frames", gt.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already spell out their causes.
            let mut parts = Vec::new();
            for cause in e.chain() {
                parts.push(cause.to_string());
                if cause.is::<ExperimentError>() {
                    break;
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}

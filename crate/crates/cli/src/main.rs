use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfp_cli::config::RunConfig;
use mfp_cli::run::{run, RunError, VariantSpec};
use mfp_cli::{bench, study};

#[derive(Parser)]
#[command(name = "mfp", version, about = "Mean-field planning, dynamic OT and potential MFG solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `[output] dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for randomized initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (grids solved concurrently by convergence-study).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configured problem and write snapshots, diagnostics and a summary.
    Run(Common),
    /// Refinement study on the 1D transport benchmark.
    ConvergenceStudy(Common),
    /// Compare solver variants on the configured problem.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list: fista, mlfista, mgfista or mgfista(K).
        #[arg(long, default_value = "fista,mlfista,mgfista")]
        variants: String,
    },
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf), RunError> {
    let cfg = RunConfig::from_path(&c.config)?;
    let out = cfg.output_dir(c.out.as_deref());
    Ok((cfg, out))
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            let r = run(&cfg, &out, c.seed)?;
            print!("{}", std::fs::read_to_string(r.dir.join("summary.txt")).unwrap_or_default());
        }
        Command::ConvergenceStudy(c) => {
            let (cfg, out) = load(&c)?;
            let table = study::convergence_study(&cfg, &cfg.study.grids, c.threads)?;
            table.write(&out)?;
            print!("{}", table.to_markdown());
        }
        Command::Bench { common: c, variants } => {
            let (cfg, out) = load(&c)?;
            let specs = variants
                .split(',')
                .map(|v| VariantSpec::parse(v, cfg.solver.k))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = bench::bench(&cfg, &specs, c.seed)?;
            bench::write(&rows, &out)?;
            print!("{}", bench::to_markdown(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}


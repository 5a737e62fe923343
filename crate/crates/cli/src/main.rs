use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ssfl_cli::commands;
use ssfl_cli::payload;
use ssfl_cli::HarnessConfig;

/// Thread-count override for the client pool.
const THREADS_ENV: &str = "SSFL_THREADS";

#[derive(Parser)]
#[command(name = "ssfl", version, about = "Semi-supervised federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,

    /// Train the clients of a round one after another.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method once per seed.
    Train,
    /// Run the component ladder of the main method.
    Ablate,
    /// Run the verification checklist.
    Verify,
    /// Compare prototype and full-model uplink sizes.
    PayloadReport,
    /// Export the synthetic dataset and client splits.
    GenData,
}

fn load(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => HarnessConfig::default(),
    };
    if cli.sequential {
        cfg.run.parallel = false;
    }
    Ok(commands::with_seed_offset(&cfg, cli.seed_offset))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    let out: &Path = &cli.out;
    match cli.command {
        Command::Train => {
            let s = commands::train(&cfg, out)?;
            for r in &s.runs {
                println!("seed {}: {:.2}%", r.seed, pct(r.accuracy));
            }
            println!(
                "{}: {:.2} ± {:.2}% over {} seeds (results in {})",
                s.method,
                pct(s.accuracy.mean),
                pct(s.accuracy.std),
                s.runs.len(),
                out.display()
            );
        }
        Command::Ablate => {
            let rows = commands::ablate(&cfg, out)?;
            for r in &rows {
                println!("{:<28} {:.2} ± {:.2}%", r.variant, pct(r.accuracy.mean), pct(r.accuracy.std));
            }
        }
        Command::Verify => {
            let list = commands::verify(&cfg)?;
            print!("{}", list.render());
            return Ok(list.passed());
        }
        Command::PayloadReport => {
            print!("{}", payload::render(&commands::payload_report(&cfg)?));
        }
        Command::GenData => {
            let n = commands::gen_data(&cfg, out)?;
            println!("wrote {n} windows to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads()?;
    let cli = Cli::parse();
    Ok(if run(&cli)? { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

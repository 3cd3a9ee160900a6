use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use deqlab::experiment::{self, ExperimentConfig, ExperimentKind};
use deqlab::{par, DeqError};

/// Kernels of deep equilibrium models: experiments, coefficients and matching.
#[derive(Parser, Debug)]
#[command(name = "deqlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by the config.
    Run(Common),
    /// Print CK/NTK coefficients of the configured DEQ as JSON.
    Coeffs(Common),
    /// Match the configured DEQ with a shallow explicit network and print the result as JSON.
    Match(Common),
    /// Validate the config and check the model assumptions.
    Check(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DEQLAB_THREADS")]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<DeqError>().is_none_or(DeqError::is_config_error);
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_NUMERIC })
        }
    }
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    Ok(ExperimentConfig::from_json(&text)?.with_seed_offset(c.seed_offset))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = match &cli.command {
        Command::Run(c) | Command::Coeffs(c) | Command::Match(c) | Command::Check(c) => c,
    };
    let cfg = load(c)?;
    par::install(c.threads, || -> anyhow::Result<()> {
        match &cli.command {
            Command::Run(_) => {
                let out = c.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
                let summary = experiment::run_experiment(&cfg, &out)?;
                for row in &summary.aggregate {
                    println!("n={} mean={:.5} median={:.5} min={:.5} max={:.5}", row.n, row.mean, row.median, row.min, row.max);
                }
                for f in &summary.files {
                    log::info!("wrote {}", f.display());
                }
                Ok(())
            }
            Command::Coeffs(_) => print_json(&experiment::coefficients(&cfg)?),
            Command::Match(_) => {
                let mut cfg = cfg.clone();
                cfg.experiment = ExperimentKind::MatchOnly;
                print_json(&experiment::match_report(&cfg)?)
            }
            Command::Check(_) => {
                let report = experiment::check(&cfg)?;
                print_json(&report)?;
                report.into_result()?;
                Ok(())
            }
        }
    })
}

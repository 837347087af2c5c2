use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfeit::experiment::{run_experiment_to, run_table1_to, ExperimentConfig, Table1Config};
use mfeit::Error;

#[derive(Parser)]
#[command(name = "mfeit", version, about = "Multifrequency EIT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one experiment.
    Run { config: PathBuf },
    /// Runs the mesh size, noise and regularization grid.
    Table1 { config: PathBuf },
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else if matches!(e.root(), Error::Io(_)) {
        EXIT_OTHER
    } else {
        EXIT_NUMERICAL
    }
}

fn run(cli: &Cli) -> mfeit::Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::from_path(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let report = run_experiment_to(&cfg, &cli.out)?;
            if !cli.quiet {
                for (label, rows) in &report.metrics {
                    for row in rows {
                        println!(
                            "{label} vs truth k={}: relative_error={:.4e} jaccard={:.3}",
                            row.k, row.metrics.relative_error, row.metrics.jaccard
                        );
                    }
                }
                println!("wrote {}", cli.out.display());
            }
        }
        Command::Table1 { config } => {
            let mut cfg = Table1Config::from_path(config)?;
            if let Some(s) = cli.seed {
                cfg.base.seed = s;
            }
            let table = run_table1_to(&cfg, &cli.out)?;
            if !cli.quiet {
                print!("{}", table.to_csv());
                println!("wrote {}", cli.out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

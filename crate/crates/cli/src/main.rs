use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guided_discrete::config::ExperimentConfig;
use guided_discrete::experiment::{run_experiment, write_csv, write_csv_file, WORKERS_ENV};
use guided_discrete::verify::{verify, SUBCOMMANDS};

#[derive(Parser)]
#[command(name = "gdd", version, about = "Gradient-guided discrete diffusion for linear inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config and write one CSV row per seed.
    Run {
        config: PathBuf,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Worker threads.
        #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
        workers: usize,
        /// CSV destination; overrides `output` in the config. Stdout when neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in check and exit nonzero on any tolerance violation.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUBCOMMANDS))]
        check: String,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed_offset,
            workers,
            out,
        } => {
            let cfg = match ExperimentConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let rows = match run_experiment(&cfg, workers, seed_offset) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("run failed: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let written = match out.or(cfg.output.clone()) {
                Some(path) => write_csv_file(&path, &rows),
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    write_csv(&mut lock, &rows).and_then(|_| Ok(lock.flush()?))
                }
            };
            if let Err(e) = written {
                eprintln!("writing CSV: {e}");
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Command::Verify { check } => match verify(&check) {
            Ok(report) => {
                for line in &report.lines {
                    println!("{line}");
                }
                println!("{}: {}", report.name, if report.passed { "PASS" } else { "FAIL" });
                if report.passed {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("verify {check}: {e}");
                ExitCode::FAILURE
            }
        },
    }
}

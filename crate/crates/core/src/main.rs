use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pwgf::harness::{self, verify, ExperimentConfig, EXIT_CONFIG, EXIT_RUNTIME};

#[derive(Parser)]
#[command(name = "pwgf", version, about = "Perturbed Wasserstein gradient flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (mode, seed) cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference and sampler self-checks.
    Verify,
    /// Classify an ensemble as NonStationary, SecondOrderStationary or Saddle.
    Classify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        dump_spectrum: Option<PathBuf>,
    },
    /// Print hyperparameters derived from problem constants.
    Defaults {
        #[arg(long)]
        constants: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        eta: f64,
    },
}

fn fail(e: pwgf::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(harness::exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match cli.command {
        Command::Run { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::run_experiment(&cfg) {
                Ok(cells) => {
                    for c in &cells {
                        println!("{}", c.summary());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify => {
            let outcome = match harness::thread_pool().and_then(|p| p.install(verify::verify)) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            outcome.print();
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME as u8)
            }
        }
        Command::Classify {
            config,
            ensemble,
            eps,
            delta,
            dump_spectrum,
        } => {
            let res = ExperimentConfig::load(&config)
                .and_then(|cfg| harness::classify_point(&cfg, &ensemble, eps, delta, dump_spectrum.as_deref()));
            match res {
                Ok(line) => {
                    println!("{line}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Defaults {
            constants,
            eps,
            delta,
            eta,
        } => match harness::defaults_report(&constants, eps, delta, eta) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}

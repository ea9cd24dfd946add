//! Command-line front end. Exit codes: 0 success, 1 malformed config,
//! 2 numeric failure, 3 IO failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mws::config::{self, Resolved};
use mws::experiments;
use mws::noise::{calibrate, SpectrumFamily};
use mws::Error;

#[derive(Parser)]
#[command(
    name = "mws",
    version,
    about = "Sensitivity estimation for particles driven by colored noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the hardware parallelism.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides rng.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running anything; lists problems and warnings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the calibrated spectrum parameters for a config.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit the analytic curves for the configured experiment, no sampling.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Io(_) => 3,
        _ => 2,
    }
}

fn load_resolved(
    path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Resolved, Error> {
    config::load(path)?.resolve(seed, out)
}

fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run {
            config,
            threads,
            seed,
            out,
        } => {
            let resolved = load_resolved(&config, seed, out.as_deref())?;
            for w in &resolved.warnings {
                eprintln!("warning: {w}");
            }
            log::info!(
                "running {} with {} trajectories",
                resolved.config.kind,
                resolved.config.n_trajectories
            );
            let artifacts = experiments::run(&resolved, threads)?;
            for w in &artifacts.warnings {
                eprintln!("warning: {w}");
            }
            for f in &artifacts.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => match config::load(&config)?.resolve(None, None) {
            Ok(resolved) => {
                for w in &resolved.warnings {
                    println!("warning: {w}");
                }
                println!(
                    "ok: {} experiment, config hash {}",
                    resolved.config.kind, resolved.hash
                );
                Ok(ExitCode::SUCCESS)
            }
            Err(Error::Config(msg)) => {
                for line in msg.lines() {
                    println!("problem: {line}");
                }
                Ok(ExitCode::from(1))
            }
            Err(e) => Err(e),
        },
        Command::Calibrate { config } => {
            let resolved = load_resolved(&config, None, None)?;
            let model = calibrate(&resolved.config.spectrum)?;
            match &model.family {
                SpectrumFamily::OrnsteinUhlenbeck { tau_p, sigma } => {
                    println!("family = ornstein-uhlenbeck");
                    println!("tau_p = {tau_p}");
                    println!("sigma_sq = {}", sigma * sigma);
                }
                SpectrumFamily::Rational { peaks } => {
                    println!("family = rational");
                    for (i, p) in peaks.iter().enumerate() {
                        println!(
                            "peak_{i} = sigma_sq {}, omega {}, ell {}",
                            p.sigma * p.sigma,
                            p.omega,
                            p.ell
                        );
                    }
                }
                SpectrumFamily::Matern { nu, sigma_sq, tau_nu } => {
                    println!("family = matern");
                    println!("nu = {nu}");
                    println!("sigma_sq = {sigma_sq}");
                    println!("tau_nu = {tau_nu}");
                }
            }
            println!("tau_c = {}", model.tau_c);
            println!("psd_zero = {}", model.psd(0.0));
            println!("psd_zero_target = {}", 2.0 * model.xi0 * model.temperature);
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { config, out } => {
            let resolved = load_resolved(&config, None, out.as_deref())?;
            let artifacts = experiments::oracle_curves(&resolved)?;
            for f in &artifacts.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qbilliard::config::{load_config, ConfigError, Overrides};
use qbilliard::pipeline::{self, RunError};

#[derive(Parser)]
#[command(name = "qbilliard", version, about = "Parabolic-wall billiard spectra and level statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Admit zero-curvature (integrable rectangle) shapes.
    #[arg(long)]
    test_mode: bool,
    /// Write per-collision trajectory tables for the classical stage.
    #[arg(long)]
    dump_trajectories: bool,
}

impl CommonFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            test_mode: self.test_mode,
            dump_trajectories: self.dump_trajectories,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: classical checks, spectra, perturbation, pooled statistics.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Parse and check a configuration, listing every violation.
    Validate {
        config: PathBuf,
        #[arg(long)]
        test_mode: bool,
    },
    /// Re-pool persisted spectrum tables and print the fit report as JSON.
    Stats {
        #[arg(required = true)]
        spectra: Vec<PathBuf>,
        /// Unfolding half-width.
        #[arg(long, default_value_t = 25)]
        window: usize,
        #[arg(long, default_value_t = 25)]
        bins: usize,
        /// Also write the pooled spacings here.
        #[arg(long)]
        spacings: Option<PathBuf>,
    },
    /// Classical stage only.
    Classical {
        config: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("cannot encode output: {0}")]
    Json(#[from] serde_json::Error),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, flags } => {
            let config = load_config(&config, &flags.overrides())?;
            let manifest = pipeline::run_experiment(&config)?;
            for shape in &manifest.shapes {
                match &shape.status {
                    pipeline::ShapeStatus::Completed => println!("{}: completed", shape.name),
                    pipeline::ShapeStatus::Failed { stage, error } => {
                        println!("{}: failed in {stage}: {error}", shape.name)
                    }
                }
            }
            if let Some(p) = &manifest.pooled {
                println!(
                    "H0     n={} ks_wigner={:.4} ks_poisson={:.4}",
                    p.h0.sample_size, p.h0.ks_wigner, p.h0.ks_poisson
                );
                println!(
                    "H(eps) n={} ks_wigner={:.4} ks_poisson={:.4}",
                    p.h_eps.sample_size, p.h_eps.ks_wigner, p.h_eps.ks_poisson
                );
            }
            println!("manifest: {}", config.output_dir.join(pipeline::MANIFEST_FILE).display());
        }
        Command::Validate { config, test_mode } => {
            let c = load_config(&config, &Overrides { test_mode, ..Default::default() })?;
            println!("{}: ok ({} shapes)", config.display(), c.shapes.len());
        }
        Command::Stats { spectra, window, bins, spacings } => {
            let (pooled, report) = pipeline::pool_spectrum_files(&spectra, window, bins)?;
            if let Some(path) = spacings {
                pipeline::write_spacings_csv(&path, &pooled)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Classical { config, flags } => {
            let config = load_config(&config, &flags.overrides())?;
            let summaries = pipeline::run_classical(&config)?;
            println!("{}", serde_json::to_string_pretty(&summaries)?);
        }
    }
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use tcil_core::datagen::to_csv;
use tcil_core::experiment::{
    bins_csv, read_metrics, run_experiment, summarize, write_metrics, ExperimentConfig,
};
use tcil_core::Error;

/// Temperature calibration experiments for class-incremental learning.
#[derive(Parser)]
#[command(name = "tcil", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train incrementally, calibrate with every configured method and emit metrics.
    Run {
        /// TOML experiment configuration.
        config: PathBuf,
        /// Metrics file (JSON lines). Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-bin reliability statistics as CSV.
        #[arg(long)]
        bins_csv: Option<PathBuf>,
    },
    /// Print a mean ± std table from a metrics file.
    Summarize { metrics: PathBuf },
    /// Write the synthetic stream described by a config as CSV.
    GenSynth {
        config: PathBuf,
        out: PathBuf,
        /// Stream seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn config(error: Error) -> Self {
        Failure { code: 2, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Label { .. } | Error::Stream(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|source| Failure {
        code: 1,
        error: Error::Io {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = read(path).map_err(Failure::config)?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(csv) = &cfg.csv_path {
        if csv.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.csv_path = Some(base.join(csv));
        }
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            bins_csv: bins,
        } => {
            let cfg = load_config(&config)?;
            info!(
                "running {} seed(s), {} calibrator(s)",
                cfg.seeds.len(),
                cfg.calibrators.len()
            );
            let records = run_experiment(&cfg)?;
            let text = write_metrics(&records);
            match out {
                Some(path) => {
                    write(&path, &text)?;
                    info!("wrote {} records to {}", records.len(), path.display());
                    print!("{}", summarize(&records)?);
                }
                None => print!("{text}"),
            }
            if let Some(path) = bins {
                write(&path, &bins_csv(&records))?;
            }
        }
        Command::Summarize { metrics } => {
            let records = read_metrics(&read(&metrics)?)?;
            print!("{}", summarize(&records)?);
        }
        Command::GenSynth { config, out, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let stream = cfg.build_stream(seed)?;
            write(&out, &to_csv(stream.all_samples()))?;
            info!("wrote {} tasks to {}", stream.num_tasks(), out.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

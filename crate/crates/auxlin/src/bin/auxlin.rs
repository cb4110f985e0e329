//! `auxlin` command line: run JSON experiment configs or estimate optimal
//! task weights from CSV datasets.
//!
//! Exit codes: 0 success, 2 config or input error, 3 numerical or
//! experiment failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use auxlin::experiment;
use auxlin::Error;

#[derive(Parser)]
#[command(name = "auxlin", version, about = "Auxiliary-task linear transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a JSON experiment config and write CSV results plus a JSON
    /// sidecar.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Output directory (default: $AUXLIN_OUT, then the current dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: $AUXLIN_THREADS, then all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Estimate optimal task weights from a directory holding X.csv and
    /// Y.csv (main-task labels last).
    Weights {
        /// Dataset directory.
        dir: PathBuf,
        /// Output directory (default: $AUXLIN_OUT, then the current dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("AUXLIN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("AUXLIN_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("AUXLIN_THREADS: cannot parse {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, threads: t } => {
            let loaded = experiment::load_config(&config)?;
            let output = experiment::run(&loaded, &out_dir(out), threads(t)?)?;
            if let Some(csv) = &output.csv_path {
                println!("wrote {}", csv.display());
            }
            if let Some(report) = &output.report {
                println!("{report:#}");
            }
            println!("wrote {}", output.sidecar_path.display());
            Ok(())
        }
        Command::Weights { dir, out } => {
            let report = experiment::weights_report(&dir)?;
            let out = out_dir(out);
            std::fs::create_dir_all(&out)?;
            let path = out.join("weights.json");
            std::fs::write(&path, format!("{report:#}\n"))?;
            println!("{report:#}");
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use crossdiff_cli::{check, parse_config, presets, run_experiment, Outcome, Verdict};

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Two-species cross-diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Run a bundled preset (`list` prints the names).
    Preset {
        name: String,
        /// Output directory instead of out/<name>.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-verify an artifact directory from its stored files.
    Check { dir: PathBuf },
}

fn report(verdicts: &[Verdict]) -> bool {
    for v in verdicts {
        println!("{}", v.line());
    }
    verdicts.iter().all(|v| v.pass)
}

fn finish(o: Outcome) -> bool {
    let ok = report(&o.verdicts);
    eprintln!("artifacts in {}", o.dir.display());
    ok
}

fn main_inner() -> Result<bool> {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("CROSSDIFF_THREADS") {
        let n: usize = n.parse().context("CROSSDIFF_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Run { config } => Ok(finish(run_experiment(&parse_config(&config)?)?)),
        Command::Preset { name, .. } if name == "list" => {
            presets::names().for_each(|n| println!("{n}"));
            Ok(true)
        }
        Command::Preset { name, output } => {
            let mut spec = presets::preset(&name)?;
            if output.is_some() {
                spec.output = output;
            }
            Ok(finish(run_experiment(&spec)?))
        }
        Command::Check { dir } => Ok(report(&check::check_dir(&dir)?)),
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

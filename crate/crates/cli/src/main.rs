use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "young-bsde", version, about = "Runs young-bsde experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv, manifest.json, summary.txt
    Run {
        config: PathBuf,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory (overrides the config and $YOUNG_BSDE_OUT)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a config without running it
    Check { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, threads, out } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
                    eprintln!("cannot size thread pool: {e}");
                }
            }
            young_bsde_cli::run(&config, out.as_deref()).map(|(dir, summary)| {
                for line in summary {
                    println!("{line}");
                }
                println!("wrote {}", dir.display());
            })
        }
        Command::Check { config } => young_bsde_cli::check(&config).map(|cfg| println!("ok: {}", cfg.experiment.name())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

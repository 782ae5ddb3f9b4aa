//! Config-driven runner for the `young-bsde` experiments.
//!
//! `run` writes three files into the output directory:
//!
//! * `results.csv`: the experiment table (RFC-4180, 17 significant digits);
//! * `manifest.json`: the config as given, seed, library version, wall time;
//! * `summary.txt`: a few human-readable lines.
//!
//! The output directory is `--out`, else the config's `output`, else
//! `$YOUNG_BSDE_OUT/<experiment>`, else `young-bsde-out/<experiment>`.

pub mod config;
pub mod experiments;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

pub use config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "YOUNG_BSDE_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] young_bsde::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for config errors, 3 for numerical failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

pub fn output_dir(cfg: &ExperimentConfig, cli_out: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("young-bsde-out"), PathBuf::from);
    root.join(cfg.experiment.name())
}

/// Parses and validates a config file without running it.
pub fn check(path: &Path) -> Result<ExperimentConfig, CliError> {
    let (cfg, _) = config::load(path)?;
    config::validate(&cfg)?;
    Ok(cfg)
}

/// Runs the experiment in `path`; returns the output directory and the
/// summary lines.
pub fn run(path: &Path, cli_out: Option<&Path>) -> Result<(PathBuf, Vec<String>), CliError> {
    let (cfg, raw) = config::load(path)?;
    config::validate(&cfg)?;
    let out = output_dir(&cfg, cli_out);
    std::fs::create_dir_all(&out)?;
    let start = Instant::now();
    let report = experiments::run(&cfg, &out)?;
    let wall = start.elapsed().as_secs_f64();
    report.csv.write(&out.join("results.csv"))?;
    let manifest = json!({
        "experiment": cfg.experiment.name(),
        "seed": cfg.seed,
        "library_version": env!("CARGO_PKG_VERSION"),
        "wall_time_seconds": wall,
        "tolerances": cfg.tolerances,
        "config": raw,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
    let mut text = format!("experiment: {}\nseed: {}\n", cfg.experiment.name(), cfg.seed);
    for line in &report.summary {
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&format!("wall time: {wall:.2} s\n"));
    std::fs::write(out.join("summary.txt"), text)?;
    Ok((out, report.summary))
}

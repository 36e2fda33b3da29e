//! Manifest-driven experiment runner for the `flowlab` command.

pub mod experiments;
pub mod manifest;
pub mod report;

use flowlab::FlowError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("manifest error: {0}")]
    Config(String),

    #[error("section [{0}] is missing from the manifest")]
    MissingSection(&'static str),

    #[error("budget exceeded: {experiment} needs about {needed:.3e} point-steps, budget is {budget:.3e}")]
    Budget { experiment: String, needed: f64, budget: f64 },

    #[error(transparent)]
    Flow(#[from] FlowError),

    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

pub use experiments::{run_section, Section};
pub use manifest::{load, parse, Loaded, Manifest};
pub use report::{Check, Curve, Outcome, RunSummary};

use std::path::{Path, PathBuf};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "FLOWLAB_OUT";
pub const DEFAULT_OUT: &str = "flowlab-out";

/// Output directory: command line, then environment, then manifest, then the default.
pub fn resolve_out(cli: Option<&Path>, env: Option<&str>, manifest: &Manifest) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| manifest.run.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs `sections` on a pool of `jobs` workers (0: one per core), writing
/// reports under `out`. A summary file is written when more than one
/// experiment ran.
pub fn execute(loaded: &Loaded, sections: &[Section], out: &Path, jobs: usize) -> Result<RunSummary, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let mut summary = RunSummary::default();
    for &s in sections {
        let outcomes = pool.install(|| run_section(loaded, s))?;
        for o in &outcomes {
            report::write_outcome(loaded, o, out)?;
            summary.add(o);
        }
    }
    if summary.rows.len() > 1 {
        std::fs::write(out.join("summary.csv"), summary.render_csv())?;
    }
    Ok(summary)
}

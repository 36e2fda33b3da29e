use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowlab::analysis::Verdict;
use flowlab_cli::{execute, load, resolve_out, CliError, Section, OUT_ENV};

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Simulate stochastic flows on the torus and check their statistical properties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Manifest file (TOML); `demo-2d` selects the bundled demonstration manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Replace the manifest noise seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (0: one per core); defaults to the manifest setting.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides FLOWLAB_OUT and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Divergence, bracket-span ranks, volume preservation, integrator convergence.
    CheckConditions(Common),
    /// Lyapunov spectrum and stretching-rate cross-check.
    Lyapunov(Common),
    /// Central limit theorem for n-point additive functionals.
    CltNpoint(Common),
    /// Central limit theorem for a transported particle measure.
    CltMeasure(Common),
    /// Decay of two-point correlations.
    Mixing(Common),
    /// Return-time tails and escape from the diagonal.
    Stopping(Common),
    /// p-energy of the transported measure.
    Energy(Common),
    /// Decay of observable averages over the transported measure.
    Equidistribution(Common),
    /// Time spent near the generalized diagonal.
    Occupation(Common),
    /// Pullback measures and the dissipative decomposition.
    Dissipative(Common),
    /// Every section present in the manifest, in a fixed order.
    Suite(Common),
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let (sections, common): (Vec<Section>, Common) = match cli.command {
        Command::CheckConditions(c) => (vec![Section::Conditions], c),
        Command::Lyapunov(c) => (vec![Section::Lyapunov], c),
        Command::CltNpoint(c) => (vec![Section::CltNpoint], c),
        Command::CltMeasure(c) => (vec![Section::CltMeasure], c),
        Command::Mixing(c) => (vec![Section::Mixing], c),
        Command::Stopping(c) => (vec![Section::Stopping], c),
        Command::Energy(c) => (vec![Section::Energy], c),
        Command::Equidistribution(c) => (vec![Section::Equidistribution], c),
        Command::Occupation(c) => (vec![Section::Occupation], c),
        Command::Dissipative(c) => (vec![Section::Dissipative], c),
        Command::Suite(c) => (Vec::from(Section::ALL), c),
    };
    let mut loaded = load(&common.manifest)?;
    if let Some(seed) = common.seed_override {
        loaded.override_seed(seed);
    }
    let sections: Vec<Section> = if sections.len() > 1 {
        sections.into_iter().filter(|s| s.present(&loaded.manifest)).collect()
    } else {
        sections
    };
    let env = std::env::var(OUT_ENV).ok();
    let out = resolve_out(common.out.as_deref(), env.as_deref(), &loaded.manifest);
    let jobs = common.jobs.unwrap_or(loaded.manifest.run.jobs);
    let summary = execute(&loaded, &sections, &out, jobs)?;
    print!("{}", summary.table());
    println!("reports written to {}", out.display());
    for (name, _, verdict) in &summary.rows {
        if *verdict == Verdict::Degenerate {
            eprintln!("warning: {name} is degenerate; no statistical check applies");
        }
    }
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

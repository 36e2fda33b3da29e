//! Report files: one JSON verdict file and zero or more CSV curves per experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowlab::analysis::Verdict;
use serde::Serialize;
use serde_json::Value;

use crate::manifest::Loaded;
use crate::CliError;

pub const TOOL: &str = "flowlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One gated or informational statement inside a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// `None` for purely informational entries.
    pub verdict: Option<Verdict>,
    pub message: String,
}

impl Check {
    pub fn gate(name: impl Into<String>, verdict: Verdict, message: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            verdict: Some(verdict),
            message: message.into(),
        }
    }

    pub fn pass(name: impl Into<String>, pass: bool, message: impl Into<String>) -> Self {
        Self::gate(name, Verdict::from_pass(pass), message)
    }

    pub fn info(name: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            verdict: None,
            message: message.into(),
        }
    }
}

/// A plot-ready table.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Result of one experiment before it is written out.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub experiment: String,
    pub property: String,
    pub dt: f64,
    pub checks: Vec<Check>,
    pub details: Value,
    pub curves: Vec<Curve>,
}

impl Outcome {
    /// Worst verdict over the gated checks; no gated checks means underpowered.
    pub fn verdict(&self) -> Verdict {
        self.checks
            .iter()
            .filter_map(|c| c.verdict)
            .reduce(Verdict::and)
            .unwrap_or(Verdict::Underpowered)
    }
}

#[derive(Serialize)]
struct Header<'a> {
    tool: &'a str,
    version: &'a str,
    manifest: &'a str,
    manifest_sha256: &'a str,
    seed: u64,
    seed_override: bool,
    dt: f64,
    scheme: flowlab::flow::Scheme,
    experiment: &'a str,
    property: &'a str,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    header: Header<'a>,
    verdict: Verdict,
    checks: &'a [Check],
    details: &'a Value,
}

fn header<'a>(loaded: &'a Loaded, outcome: &'a Outcome) -> Header<'a> {
    Header {
        tool: TOOL,
        version: VERSION,
        manifest: &loaded.manifest.name,
        manifest_sha256: &loaded.sha256,
        seed: loaded.manifest.noise.seed,
        seed_override: loaded.seed_override,
        dt: outcome.dt,
        scheme: loaded.manifest.noise.scheme,
        experiment: &outcome.experiment,
        property: &outcome.property,
    }
}

pub fn render_json(loaded: &Loaded, outcome: &Outcome) -> String {
    let file = ReportFile {
        header: header(loaded, outcome),
        verdict: outcome.verdict(),
        checks: &outcome.checks,
        details: &outcome.details,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("report serializes");
    s.push('\n');
    s
}

pub fn render_csv(loaded: &Loaded, outcome: &Outcome, curve: &Curve) -> String {
    let mut s = format!(
        "# {TOOL} {VERSION} manifest={} sha256={} experiment={} seed={} dt={}\n",
        loaded.manifest.name, loaded.sha256, outcome.experiment, loaded.manifest.noise.seed, outcome.dt
    );
    s.push_str(&curve.columns.join(","));
    s.push('\n');
    for row in &curve.rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes `<experiment>.json` and `<experiment>_<curve>.csv` files; returns their paths.
pub fn write_outcome(loaded: &Loaded, outcome: &Outcome, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = dir.join(format!("{}.json", outcome.experiment));
    std::fs::write(&json, render_json(loaded, outcome))?;
    written.push(json);
    for curve in &outcome.curves {
        let path = dir.join(format!("{}_{}.csv", outcome.experiment, curve.name));
        std::fs::write(&path, render_csv(loaded, outcome, curve))?;
        written.push(path);
    }
    Ok(written)
}

/// Verdict table over several experiments.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub rows: Vec<(String, String, Verdict)>,
}

impl RunSummary {
    pub fn add(&mut self, outcome: &Outcome) {
        self.rows
            .push((outcome.experiment.clone(), outcome.property.clone(), outcome.verdict()));
    }

    pub fn overall(&self) -> Verdict {
        self.rows
            .iter()
            .map(|r| r.2)
            .reduce(Verdict::and)
            .unwrap_or(Verdict::Underpowered)
    }

    /// 0 unless some verdict is inconsistent.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.rows.iter().any(|r| r.2 == Verdict::Inconsistent))
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(10).max(10);
        let mut s = format!("{:width$}  {:12}  property\n", "experiment", "verdict");
        for (name, property, verdict) in &self.rows {
            let _ = writeln!(s, "{name:width$}  {:12}  {property}", verdict.label());
        }
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("experiment,verdict,property\n");
        for (name, property, verdict) in &self.rows {
            let _ = writeln!(s, "{name},{},\"{}\"", verdict.label(), property.replace('"', "'"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(verdicts: &[Option<Verdict>]) -> Outcome {
        Outcome {
            experiment: "x".into(),
            property: "p".into(),
            dt: 0.01,
            checks: verdicts
                .iter()
                .map(|v| Check {
                    name: "c".into(),
                    verdict: *v,
                    message: String::new(),
                })
                .collect(),
            details: Value::Null,
            curves: Vec::new(),
        }
    }

    #[test]
    fn informational_checks_do_not_gate() {
        assert_eq!(outcome(&[None]).verdict(), Verdict::Underpowered);
        assert_eq!(
            outcome(&[None, Some(Verdict::Consistent)]).verdict(),
            Verdict::Consistent
        );
        assert_eq!(
            outcome(&[Some(Verdict::Consistent), Some(Verdict::Inconsistent)]).verdict(),
            Verdict::Inconsistent
        );
    }

    #[test]
    fn summary_exit_code_follows_inconsistency() {
        let mut s = RunSummary::default();
        s.add(&outcome(&[Some(Verdict::Underpowered)]));
        assert_eq!(s.exit_code(), 0);
        s.add(&outcome(&[Some(Verdict::Inconsistent)]));
        assert_eq!(s.exit_code(), 1);
    }
}

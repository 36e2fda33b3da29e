//! Experiment manifests: a versioned TOML schema in which unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowlab::analysis::PathParams;
use flowlab::fields::{make_field_set, read_field_set, FieldSetSpec, VectorFieldSet};
use flowlab::flow::Scheme;
use flowlab::measures::MeasureSpec;
use flowlab::trig::{TrigMap, TrigTerm};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Bundled manifest for the 2-D demonstration set.
pub const DEMO_2D: &str = include_str!("../manifests/demo-2d.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub name: String,
    pub fields: FieldSource,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub run: RunConfig,
    pub conditions: Option<ConditionsConfig>,
    pub lyapunov: Option<LyapunovConfig>,
    #[serde(default)]
    pub clt_npoint: Vec<NpointConfig>,
    pub clt_measure: Option<MeasureCltConfig>,
    pub mixing: Option<MixingConfig>,
    pub stopping: Option<StoppingConfig>,
    pub energy: Option<EnergyConfig>,
    #[serde(default)]
    pub equidistribution: Vec<EquidistributionConfig>,
    pub occupation: Option<OccupationConfig>,
    pub dissipative: Option<DissipativeConfig>,
}

/// Either a field-set file or construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSource {
    File(FieldFile),
    Spec(FieldSetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFile {
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub seed: u64,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
    pub out: Option<PathBuf>,
    /// Largest number of single-point integration steps one experiment may request.
    pub budget: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            jobs: 0,
            out: None,
            budget: None,
        }
    }
}

/// A scalar trigonometric observable given by its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    pub terms: Vec<ScalarTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarTerm {
    pub mode: Vec<i32>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

impl ObservableConfig {
    pub fn build(&self, input_dim: usize) -> Result<TrigMap, CliError> {
        let terms = self.terms.iter().map(|t| TrigTerm::scalar(t.mode.clone(), t.cos, t.sin)).collect();
        Ok(TrigMap::new(input_dim, 1, terms)?)
    }
}

/// `Σ_i w_i (x^i_t − x^i_0)_component` plus an optional extra drift on the
/// product torus, centered before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub component: usize,
    #[serde(default)]
    pub extra_drift: Vec<ScalarTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub x0: Vec<f64>,
    pub dts: Vec<f64>,
    pub t: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    pub x0: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub reps: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    /// Random configurations per check.
    pub configs: usize,
    pub depth: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsConfig {
    pub ranks: RankConfig,
    pub volume: Option<VolumeConfig>,
    pub convergence: Option<ConvergenceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    pub dt: Option<f64>,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub t_final: f64,
    pub segments: usize,
    pub ranks: Option<RankConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpointConfig {
    pub name: String,
    pub dt: Option<f64>,
    pub points: Vec<Vec<f64>>,
    pub functional: FunctionalConfig,
    pub horizons: Vec<f64>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureCltConfig {
    pub dt: Option<f64>,
    pub measure: MeasureSpec,
    pub t: f64,
    pub realizations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingConfig {
    pub dt: Option<f64>,
    pub x: Vec<f64>,
    /// Unit direction along which the second point is displaced.
    pub direction: Vec<f64>,
    pub separations: Vec<f64>,
    pub observables: Vec<ObservableConfig>,
    pub t_final: f64,
    pub every: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeConfig {
    pub separations: Vec<f64>,
    pub bases: usize,
    pub direction: Vec<f64>,
    pub t_max: f64,
    /// Moment orders as fractions of the fitted tail rate.
    pub alpha_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    pub dt: Option<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Outer radius; defaults to a tenth of the torus diameter.
    pub radius: Option<f64>,
    pub delta: Option<f64>,
    pub t_final: f64,
    pub reps: usize,
    pub min_samples: usize,
    pub escape: EscapeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub dt: Option<f64>,
    pub measure: MeasureSpec,
    pub p: f64,
    pub times: Vec<f64>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquidistributionConfig {
    pub name: String,
    pub dt: Option<f64>,
    pub measure: MeasureSpec,
    pub observable: ObservableConfig,
    pub times: Vec<f64>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupationConfig {
    pub dt: Option<f64>,
    pub points: Vec<Vec<f64>>,
    pub radius: f64,
    pub threshold: f64,
    pub horizons: Vec<f64>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PullbackConfig {
    pub first: MeasureSpec,
    pub second: MeasureSpec,
    pub observable: ObservableConfig,
    pub depths: Vec<f64>,
    pub t: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantCloudConfig {
    pub x0: Vec<f64>,
    pub burn_in: f64,
    pub every: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionConfig {
    pub measure: MeasureSpec,
    pub component: usize,
    pub depth: f64,
    pub t: f64,
    pub realizations: usize,
    /// Long-run occupation cloud standing in for the one-point invariant measure.
    pub invariant: InvariantCloudConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusivityConfig {
    pub x0: Vec<f64>,
    /// Increasing horizons; the last must equal the decomposition horizon.
    pub horizons: Vec<f64>,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissipativeConfig {
    pub dt: Option<f64>,
    pub epsilons: Vec<f64>,
    /// Seed of the random potential whose gradient is added to `X_0`.
    pub potential_seed: u64,
    pub pullback: PullbackConfig,
    pub decomposition: DecompositionConfig,
    pub diffusivity: DiffusivityConfig,
}

/// A parsed manifest with its hash and resolved fields.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub sha256: String,
    pub fields: VectorFieldSet,
    pub seed_override: bool,
}

impl Loaded {
    /// Replaces the noise seed; reports record that the manifest seed was overridden.
    pub fn override_seed(&mut self, seed: u64) {
        self.manifest.noise.seed = seed;
        self.seed_override = true;
    }

    pub fn params(&self, dt: Option<f64>) -> PathParams {
        PathParams {
            seed: self.manifest.noise.seed,
            dt: dt.unwrap_or(self.manifest.noise.dt),
            scheme: self.manifest.noise.scheme,
            stream_offset: 0,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses and validates manifest text. Relative field-file paths resolve
/// against `base`.
pub fn parse(text: &str, base: Option<&Path>) -> Result<Loaded, CliError> {
    let manifest: Manifest = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if manifest.schema != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "manifest schema {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema
        )));
    }
    if !(manifest.noise.dt > 0.0) {
        return Err(CliError::Config("noise.dt must be positive".into()));
    }
    let fields = match &manifest.fields {
        FieldSource::Spec(spec) => make_field_set(spec)?,
        FieldSource::File(f) => {
            let path = match base {
                Some(b) if f.file.is_relative() => b.join(&f.file),
                _ => f.file.clone(),
            };
            read_field_set(&path)?
        }
    };
    Ok(Loaded {
        sha256: sha256_hex(text.as_bytes()),
        manifest,
        fields,
        seed_override: false,
    })
}

/// Reads a manifest file; the name `demo-2d` selects the bundled manifest
/// when no such file exists.
pub fn load(path: &Path) -> Result<Loaded, CliError> {
    if !path.exists() && path.as_os_str() == "demo-2d" {
        return parse(DEMO_2D, None);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    parse(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_manifest_parses() {
        let l = parse(DEMO_2D, None).unwrap();
        assert_eq!(l.manifest.name, "demo-2d");
        assert_eq!(l.fields.dim(), 2);
        assert_eq!(l.fields.d(), 3);
        assert!(l.fields.divergence_free());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = DEMO_2D.replacen("[noise]", "[noise]\ncolour = 3", 1);
        assert!(matches!(parse(&text, None), Err(CliError::Config(_))));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let text = DEMO_2D.replacen("schema = 1", "schema = 7", 1);
        assert!(matches!(parse(&text, None), Err(CliError::Config(_))));
    }
}

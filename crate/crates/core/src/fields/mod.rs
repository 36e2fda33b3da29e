//! Periodic vector-field sets `X_0, …, X_d` on the flat torus `T^N = [0,1)^N`.
//!
//! Fields are trigonometric polynomials, so values, Jacobians and divergences
//! are exact closed forms. Bracket-span rank checks live in [`bracket`].

pub mod bracket;
mod file;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::trig::{PhaseTable, TrigMap, TrigTerm};

pub use bracket::{
    bracket_span_rank, check_projective_hypoellipticity, eval_expr, lie_bracket, BracketConfig,
    FieldExpr, RankReport,
};
pub use file::{read_field_set, write_field_set};

/// Construction parameters for a random (or explicit) field set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSetSpec {
    pub dim: usize,
    /// Number of driving fields `X_1 … X_d`.
    pub d: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: i32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub divergence_free: bool,
    /// RMS magnitude of each driving field.
    #[serde(default = "default_noise_amplitude")]
    pub noise_amplitude: f64,
    /// RMS magnitude of the drift field `X_0`.
    #[serde(default)]
    pub drift_amplitude: f64,
    /// Magnitude ε of a gradient (compressible) perturbation added to `X_0`.
    #[serde(default)]
    pub dissipation: f64,
    /// Explicit coefficients for `X_0 … X_d`; replaces the random draw when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<Vec<Vec<TrigTerm>>>,
}

fn default_bandwidth() -> i32 {
    1
}

pub const DEFAULT_NOISE_AMPLITUDE: f64 = 0.15;

fn default_noise_amplitude() -> f64 {
    DEFAULT_NOISE_AMPLITUDE
}

impl FieldSetSpec {
    pub fn random(dim: usize, d: usize, bandwidth: i32, seed: u64, divergence_free: bool) -> Self {
        Self {
            dim,
            d,
            bandwidth,
            seed,
            divergence_free,
            noise_amplitude: DEFAULT_NOISE_AMPLITUDE,
            drift_amplitude: 0.0,
            dissipation: 0.0,
            explicit: None,
        }
    }

    pub fn explicit(dim: usize, fields: Vec<Vec<TrigTerm>>, divergence_free: bool) -> Self {
        let bandwidth = fields
            .iter()
            .flatten()
            .map(TrigTerm::bandwidth)
            .max()
            .unwrap_or(0);
        Self {
            dim,
            d: fields.len().saturating_sub(1),
            bandwidth,
            seed: 0,
            divergence_free,
            noise_amplitude: DEFAULT_NOISE_AMPLITUDE,
            drift_amplitude: 0.0,
            dissipation: 0.0,
            explicit: Some(fields),
        }
    }
}

/// The fields `X_0 … X_d` of a stochastic flow on `T^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldSet {
    dim: usize,
    divergence_free: bool,
    fields: Vec<TrigMap>,
    bandwidth: i32,
}

/// Modes `m` with `|m|_∞ ≤ bandwidth`, `m ≠ 0`, first nonzero entry positive.
pub fn half_lattice(dim: usize, bandwidth: i32) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let side = (2 * bandwidth + 1) as usize;
    let total = side.pow(dim as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut mode = vec![0i32; dim];
        for m in mode.iter_mut() {
            *m = (rem % side) as i32 - bandwidth;
            rem /= side;
        }
        if let Some(&first) = mode.iter().find(|&&m| m != 0) {
            if first > 0 {
                out.push(mode);
            }
        }
    }
    out
}

/// Orthogonal projection `v - (m·v/|m|²) m` onto `{v : m·v = 0}`.
pub fn project_solenoidal(mode: &[i32], v: &[f64]) -> Vec<f64> {
    let mm: f64 = mode.iter().map(|&m| (m * m) as f64).sum();
    if mm == 0.0 {
        return v.to_vec();
    }
    let mv: f64 = mode.iter().zip(v).map(|(&m, &x)| m as f64 * x).sum();
    v.iter()
        .zip(mode)
        .map(|(&x, &m)| x - mv / mm * m as f64)
        .collect()
}

/// Builds a field set from `spec`.
pub fn make_field_set(spec: &FieldSetSpec) -> Result<VectorFieldSet> {
    if spec.dim == 0 {
        return Err(FlowError::InvalidArgument("dim must be >= 1".into()));
    }
    if spec.bandwidth < 0 {
        return Err(FlowError::InvalidArgument("bandwidth must be >= 0".into()));
    }
    let dim = spec.dim;
    let mut fields: Vec<Vec<TrigTerm>> = match &spec.explicit {
        Some(explicit) => {
            if explicit.len() < 2 {
                return Err(FlowError::InvalidArgument(
                    "explicit field set needs X_0 and at least one driving field".into(),
                ));
            }
            explicit.clone()
        }
        None => {
            if spec.d == 0 {
                return Err(FlowError::InvalidArgument("d must be >= 1".into()));
            }
            random_terms(spec)?
        }
    };
    if spec.divergence_free {
        for terms in fields.iter_mut() {
            for t in terms.iter_mut() {
                if t.mode.len() != dim {
                    return Err(FlowError::InvalidArgument(format!(
                        "mode {:?} does not match dim {dim}",
                        t.mode
                    )));
                }
                if t.is_constant() {
                    continue;
                }
                if dim == 1 {
                    return Err(FlowError::NoDivergenceFreeField(format!(
                        "mode {:?} in dimension 1",
                        t.mode
                    )));
                }
                t.cos_part = project_solenoidal(&t.mode, &t.cos_part);
                t.sin_part = project_solenoidal(&t.mode, &t.sin_part);
            }
        }
    }
    let maps = fields
        .into_iter()
        .map(|terms| TrigMap::new(dim, dim, terms))
        .collect::<Result<Vec<_>>>()?;
    let set = VectorFieldSet::from_maps(dim, maps, spec.divergence_free)?;
    if spec.dissipation != 0.0 {
        set.with_dissipation(spec.dissipation, spec.seed ^ 0xD155_1FA7)
    } else {
        Ok(set)
    }
}

fn random_terms(spec: &FieldSetSpec) -> Result<Vec<Vec<TrigTerm>>> {
    let dim = spec.dim;
    if spec.divergence_free && dim == 1 && spec.bandwidth > 0 {
        return Err(FlowError::NoDivergenceFreeField(
            "no nonconstant divergence-free field in dimension 1".into(),
        ));
    }
    let modes = half_lattice(dim, spec.bandwidth);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let effective_dim = if spec.divergence_free {
        (dim - 1).max(1)
    } else {
        dim
    } as f64;
    let mut out = Vec::with_capacity(spec.d + 1);
    for k in 0..=spec.d {
        let amp = if k == 0 {
            spec.drift_amplitude
        } else {
            spec.noise_amplitude
        };
        // each mode contributes (|a|² + |b|²)/2 to the mean square
        let sigma = if modes.is_empty() {
            0.0
        } else {
            amp / (modes.len() as f64 * effective_dim).sqrt()
        };
        let mut terms = Vec::with_capacity(modes.len());
        for m in &modes {
            let mut draw = || -> Vec<f64> {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z
                    })
                    .collect()
            };
            let c = draw();
            let s = draw();
            if amp != 0.0 {
                terms.push(TrigTerm::new(m.clone(), c, s));
            }
        }
        out.push(terms);
    }
    Ok(out)
}

impl VectorFieldSet {
    pub fn from_maps(dim: usize, fields: Vec<TrigMap>, divergence_free: bool) -> Result<Self> {
        if fields.len() < 2 {
            return Err(FlowError::InvalidArgument(
                "need X_0 and at least one driving field".into(),
            ));
        }
        for f in &fields {
            if f.input_dim() != dim || f.output_dim() != dim {
                return Err(FlowError::InvalidArgument("field shape mismatch".into()));
            }
        }
        let bandwidth = fields.iter().map(TrigMap::bandwidth).max().unwrap_or(0);
        Ok(Self {
            dim,
            divergence_free,
            fields,
            bandwidth,
        })
    }

    /// Constant fields `X_k ≡ c_k`.
    pub fn constant(dim: usize, constants: &[Vec<f64>]) -> Result<Self> {
        let maps = constants
            .iter()
            .map(|c| {
                if c.len() != dim {
                    Err(FlowError::InvalidArgument("constant length mismatch".into()))
                } else {
                    Ok(TrigMap::constant(dim, c))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_maps(dim, maps, true)
    }

    pub fn zero(dim: usize, d: usize) -> Self {
        Self::from_maps(dim, vec![TrigMap::zero(dim, dim); d + 1], true)
            .expect("zero set is well formed")
    }

    /// Adds `ε ∇ψ` to `X_0` for a random trigonometric potential `ψ`; the result
    /// is no longer divergence-free when `ε ≠ 0`.
    pub fn with_dissipation(&self, epsilon: f64, seed: u64) -> Result<Self> {
        if epsilon == 0.0 {
            return Ok(self.clone());
        }
        let bandwidth = self.bandwidth.max(1);
        let modes = half_lattice(self.dim, bandwidth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = self.fields[0].terms().to_vec();
        let norm = (modes.len() as f64).sqrt();
        for m in &modes {
            let mm: f64 = m.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
            let c: f64 = StandardNormal.sample(&mut rng);
            let s: f64 = StandardNormal.sample(&mut rng);
            // ψ = (c cos + s sin)/(2π|m| norm); ∇ψ = 2π m (−c sin + s cos)/(2π|m| norm)
            let scale = epsilon / (mm * norm);
            terms.push(TrigTerm::new(
                m.clone(),
                m.iter().map(|&v| scale * s * v as f64).collect(),
                m.iter().map(|&v| -scale * c * v as f64).collect(),
            ));
        }
        let mut fields = self.fields.clone();
        fields[0] = TrigMap::new(self.dim, self.dim, terms)?;
        Self::from_maps(self.dim, fields, false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of driving fields.
    pub fn d(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn divergence_free(&self) -> bool {
        self.divergence_free
    }

    pub fn bandwidth(&self) -> i32 {
        self.bandwidth
    }

    pub fn fields(&self) -> &[TrigMap] {
        &self.fields
    }

    pub fn field(&self, k: usize) -> Result<&TrigMap> {
        self.fields.get(k).ok_or(FlowError::IndexOutOfRange {
            index: k,
            limit: self.fields.len(),
        })
    }

    pub fn eval_field(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.field(k)?.eval(x))
    }

    /// `DX_k(x)` with entries `∂(X_k)_i/∂x_j`.
    pub fn eval_jacobian(&self, k: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.field(k)?.jacobian(x);
        Ok(DMatrix::from_row_slice(self.dim, self.dim, &j))
    }

    pub fn divergence(&self, k: usize, x: &[f64]) -> Result<f64> {
        Ok(self.eval_jacobian(k, x)?.trace())
    }

    /// Evaluates every field and Jacobian at `x` in one pass.
    pub fn evaluate_all(&self, x: &[f64], out: &mut PointEval) {
        out.prepare(self);
        out.table.fill(x, self.bandwidth);
        let n = self.dim;
        for (k, f) in self.fields.iter().enumerate() {
            f.eval_with(&out.table, &mut out.values[k * n..(k + 1) * n]);
            f.jacobian_with(&out.table, &mut out.jacobians[k * n * n..(k + 1) * n * n]);
        }
    }
}

/// Scratch holding all field values and Jacobians at one point.
#[derive(Debug, Clone, Default)]
pub struct PointEval {
    pub table: PhaseTable,
    /// `X_k(x)` at `[k*N..(k+1)*N]`.
    pub values: Vec<f64>,
    /// Row-major `DX_k(x)` at `[k*N*N..(k+1)*N*N]`.
    pub jacobians: Vec<f64>,
}

impl PointEval {
    fn prepare(&mut self, set: &VectorFieldSet) {
        let n = set.dim;
        let count = set.fields.len();
        self.values.resize(count * n, 0.0);
        self.jacobians.resize(count * n * n, 0.0);
    }

    #[inline]
    pub fn value(&self, k: usize, n: usize) -> &[f64] {
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn jacobian(&self, k: usize, n: usize) -> &[f64] {
        &self.jacobians[k * n * n..(k + 1) * n * n]
    }
}

/// Scalar test field `amp·sin(2π x_j)` in component `i` (a shear when `i ≠ j`).
pub fn shear_term(dim: usize, component: usize, along: usize, amp: f64) -> TrigTerm {
    let mut mode = vec![0; dim];
    mode[along] = 1;
    let mut sin_part = vec![0.0; dim];
    sin_part[component] = amp;
    TrigTerm::new(mode, vec![0.0; dim], sin_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn naive_eval(set: &VectorFieldSet, k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; set.dim()];
        for t in set.fields()[k].terms() {
            let arg = TAU * t.mode.iter().zip(x).map(|(&m, &v)| m as f64 * v).sum::<f64>();
            for i in 0..out.len() {
                out[i] += t.cos_part[i] * arg.cos() + t.sin_part[i] * arg.sin();
            }
        }
        out
    }

    fn fd_jacobian(set: &VectorFieldSet, k: usize, x: &[f64], h: f64) -> Vec<f64> {
        let n = set.dim();
        let mut out = vec![0.0; n * n];
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (naive_eval(set, k, &xp), naive_eval(set, k, &xm));
            for i in 0..n {
                out[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn zero_coefficients_give_zero_fields() {
        let spec = FieldSetSpec::explicit(2, vec![vec![], vec![], vec![]], false);
        let set = make_field_set(&spec).unwrap();
        for k in 0..=2 {
            assert_eq!(set.eval_field(k, &[0.3, 0.7]).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn orthogonal_mode_is_kept_unchanged() {
        let term = TrigTerm::new(vec![0, 1], vec![1.0, 0.0], vec![0.0, 0.0]);
        let spec = FieldSetSpec::explicit(2, vec![vec![], vec![term.clone()]], true);
        let set = make_field_set(&spec).unwrap();
        assert_eq!(set.fields()[1].terms()[0], term);
        let v = set.eval_field(1, &[0.3, 0.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] == 0.0);
    }

    #[test]
    fn projection_matches_least_squares() {
        let term = TrigTerm::new(vec![1, 1], vec![1.0, 0.0], vec![0.0, 0.0]);
        let spec = FieldSetSpec::explicit(2, vec![vec![], vec![term]], true);
        let set = make_field_set(&spec).unwrap();
        let stored = &set.fields()[1].terms()[0].cos_part;
        // brute force: minimize |(1,0) - w|² over w = s(1,-1) on a fine grid of s
        let mut best = (f64::INFINITY, 0.0);
        for i in -20000..=20000 {
            let s = i as f64 * 1e-4;
            let err = (1.0 - s).powi(2) + s.powi(2);
            if err < best.0 {
                best = (err, s);
            }
        }
        assert!((stored[0] - best.1).abs() < 1e-4 && (stored[1] + best.1).abs() < 1e-4);
        assert!((stored[0] - 0.5).abs() < 1e-15 && (stored[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_divergence_free_is_rejected() {
        let term = TrigTerm::new(vec![1], vec![1.0], vec![0.0]);
        let spec = FieldSetSpec::explicit(1, vec![vec![], vec![term]], true);
        assert!(matches!(
            make_field_set(&spec),
            Err(FlowError::NoDivergenceFreeField(_))
        ));
        assert!(make_field_set(&FieldSetSpec::random(1, 1, 1, 0, true)).is_err());
        // constant modes are fine
        let c = TrigTerm::new(vec![0], vec![1.0], vec![0.0]);
        assert!(make_field_set(&FieldSetSpec::explicit(1, vec![vec![], vec![c]], true)).is_ok());
    }

    #[test]
    fn single_term_examples() {
        let x_sin_x2 = shear_term(2, 0, 1, 1.0);
        let set = make_field_set(&FieldSetSpec::explicit(
            2,
            vec![vec![], vec![x_sin_x2], vec![shear_term(2, 0, 0, 1.0)]],
            false,
        ))
        .unwrap();
        let j = set.eval_jacobian(1, &[0.0, 0.0]).unwrap();
        assert!((j[(0, 1)] - TAU).abs() < 1e-15);
        assert_eq!(j[(0, 0)], 0.0);
        assert_eq!(j[(1, 0)], 0.0);
        assert_eq!(j[(1, 1)], 0.0);
        assert!(set.divergence(2, &[0.25, 0.0]).unwrap().abs() < 1e-14);
        assert!((set.divergence(2, &[0.0, 0.0]).unwrap() - TAU).abs() < 1e-14);
        let c = set.eval_field(1, &[0.3, 0.0]).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_field_evaluates_to_constant() {
        let set = VectorFieldSet::constant(2, &[vec![0.0, 0.0], vec![0.3, -1.2]]).unwrap();
        assert_eq!(set.eval_field(1, &[0.71, 0.12]).unwrap(), vec![0.3, -1.2]);
        assert_eq!(set.eval_jacobian(1, &[0.71, 0.12]).unwrap().norm(), 0.0);
    }

    #[test]
    fn index_out_of_range() {
        let set = VectorFieldSet::zero(2, 1);
        assert!(matches!(
            set.eval_field(2, &[0.0, 0.0]),
            Err(FlowError::IndexOutOfRange { .. })
        ));
        assert!(set.eval_jacobian(5, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn random_sets_match_naive_summation() {
        let set = make_field_set(&FieldSetSpec::random(3, 2, 2, 11, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            for k in 0..=2 {
                let a = set.eval_field(k, &x).unwrap();
                let b = naive_eval(&set, k, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for draw in 0..100u64 {
            let spec = FieldSetSpec {
                drift_amplitude: 1.0,
                ..FieldSetSpec::random(2 + (draw % 2) as usize, 2, 2, draw, draw % 3 == 0)
            };
            let set = make_field_set(&spec).unwrap();
            let k = (draw % 3) as usize;
            let x: Vec<f64> = (0..set.dim()).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            let exact = set.fields()[k].jacobian(&x);
            let fd = fd_jacobian(&set, k, &x, 1e-5);
            let scale = exact.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
            for (a, b) in exact.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
            }
            let tr: f64 = (0..set.dim()).map(|i| fd[i * set.dim() + i]).sum();
            assert!((set.divergence(k, &x).unwrap() - tr).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn divergence_free_sets_have_zero_divergence() {
        let set = make_field_set(&FieldSetSpec {
            drift_amplitude: 0.7,
            ..FieldSetSpec::random(3, 3, 2, 5, true)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            for k in 0..=3 {
                assert!(set.divergence(k, &x).unwrap().abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn dissipation_breaks_divergence_free() {
        let base = make_field_set(&FieldSetSpec::random(2, 2, 1, 5, true)).unwrap();
        let diss = base.with_dissipation(0.3, 9).unwrap();
        assert!(!diss.divergence_free());
        let max_div = (0..20)
            .map(|i| diss.divergence(0, &[0.05 * i as f64, 0.3]).unwrap().abs())
            .fold(0.0, f64::max);
        assert!(max_div > 1e-3);
        assert_eq!(diss.fields()[1], base.fields()[1]);
    }

    proptest! {
        #[test]
        fn fields_are_periodic(seed in 0u64..500, x0 in 0.0f64..1.0, x1 in 0.0f64..1.0, axis in 0usize..2) {
            let set = make_field_set(&FieldSetSpec { drift_amplitude: 1.0, ..FieldSetSpec::random(2, 2, 2, seed, seed % 2 == 0) }).unwrap();
            let x = [x0, x1];
            let mut y = x;
            y[axis] += 1.0;
            for k in 0..=2 {
                let (a, b) = (set.eval_field(k, &x).unwrap(), set.eval_field(k, &y).unwrap());
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
                let (ja, jb) = (set.eval_jacobian(k, &x).unwrap(), set.eval_jacobian(k, &y).unwrap());
                prop_assert!((ja - jb).abs().max() <= 1e-11);
            }
        }
    }
}

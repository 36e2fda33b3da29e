//! Additive functionals `dA = Σ_k α_k(z) ∘ dθ_k + a(z) dt` of the n-point motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::trig::{PhaseTable, TrigMap};

/// Coefficients of an additive functional reading `arity` points.
///
/// Coefficients are trigonometric polynomials on `(T^N)^arity` with values in
/// `R^q`, so the Lie derivatives entering the Itô drift are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    pub arity: usize,
    /// `α_1 … α_d`.
    pub alpha: Vec<TrigMap>,
    /// `a`.
    pub drift: TrigMap,
    #[serde(default)]
    pub centered: bool,
    /// Constants already subtracted from each `α_k`.
    #[serde(default)]
    pub alpha_shift: Vec<Vec<f64>>,
    /// Constant already subtracted from `a`.
    #[serde(default)]
    pub drift_shift: Vec<f64>,
}

impl FunctionalSpec {
    pub fn new(arity: usize, alpha: Vec<TrigMap>, drift: TrigMap) -> Result<Self> {
        if arity == 0 {
            return Err(FlowError::InvalidArgument("functional arity must be >= 1".into()));
        }
        let input = drift.input_dim();
        let q = drift.output_dim();
        if input % arity != 0 {
            return Err(FlowError::InvalidArgument(format!(
                "input dimension {input} not divisible by arity {arity}"
            )));
        }
        for m in &alpha {
            if m.input_dim() != input || m.output_dim() != q {
                return Err(FlowError::InvalidArgument("alpha/drift shape mismatch".into()));
            }
        }
        Ok(Self {
            arity,
            alpha_shift: vec![vec![0.0; q]; alpha.len()],
            drift_shift: vec![0.0; q],
            alpha,
            drift,
            centered: false,
        })
    }

    /// The identically zero functional.
    pub fn zero(arity: usize, dim: usize, d: usize, q: usize) -> Self {
        Self::new(
            arity,
            vec![TrigMap::zero(arity * dim, q); d],
            TrigMap::zero(arity * dim, q),
        )
        .expect("zero functional is well formed")
    }

    /// `α_k = X_k`, `a = X_0`: the functional whose value is the lifted displacement.
    pub fn displacement(fields: &VectorFieldSet) -> Self {
        Self::new(1, fields.fields()[1..].to_vec(), fields.fields()[0].clone())
            .expect("field maps share a shape")
    }

    /// Arity-`n` scalar functional `Σ_i w_i (x^i_t − x^i_0)_c` for `n = weights.len()`.
    pub fn weighted_displacement(fields: &VectorFieldSet, weights: &[f64], component: usize) -> Result<Self> {
        let n = fields.dim();
        if component >= n {
            return Err(FlowError::IndexOutOfRange {
                index: component,
                limit: n,
            });
        }
        let total = n * weights.len();
        let lifted = |f: &TrigMap| -> Result<TrigMap> {
            let parts: Vec<TrigMap> = (0..weights.len())
                .map(|i| f.component(component).embed(total, i * n))
                .collect();
            TrigMap::combine(&weights.iter().copied().zip(&parts).collect::<Vec<_>>())
        };
        let maps = fields.fields().iter().map(lifted).collect::<Result<Vec<_>>>()?;
        Self::new(weights.len(), maps[1..].to_vec(), maps[0].clone())
    }

    /// Linear combination of functionals with identical shapes.
    pub fn combine(parts: &[(f64, &FunctionalSpec)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| FlowError::InvalidArgument("empty combination".into()))?
            .1;
        let d = first.alpha.len();
        let mut alpha = Vec::with_capacity(d);
        for k in 0..d {
            let terms: Vec<(f64, &TrigMap)> = parts.iter().map(|(w, s)| (*w, &s.alpha[k])).collect();
            alpha.push(TrigMap::combine(&terms)?);
        }
        let drift: Vec<(f64, &TrigMap)> = parts.iter().map(|(w, s)| (*w, &s.drift)).collect();
        Self::new(first.arity, alpha, TrigMap::combine(&drift)?)
    }

    pub fn d(&self) -> usize {
        self.alpha.len()
    }

    pub fn output_dim(&self) -> usize {
        self.drift.output_dim()
    }

    pub fn point_dim(&self) -> usize {
        self.drift.input_dim() / self.arity
    }

    pub fn bandwidth(&self) -> i32 {
        self.alpha
            .iter()
            .map(TrigMap::bandwidth)
            .chain(std::iter::once(self.drift.bandwidth()))
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn check_against(&self, fields: &VectorFieldSet) -> Result<()> {
        if self.alpha.len() != fields.d() {
            return Err(FlowError::InvalidArgument(format!(
                "functional has {} alpha coefficients, field set has d = {}",
                self.alpha.len(),
                fields.d()
            )));
        }
        if self.point_dim() != fields.dim() {
            return Err(FlowError::InvalidArgument("functional dimension mismatch".into()));
        }
        Ok(())
    }

    /// Itô drift `a(z) + ½ Σ_k L_{(X_k,…,X_k)} α_k(z)` written into `out`.
    pub fn ito_drift(&self, fields: &VectorFieldSet, z: &[f64], out: &mut [f64]) {
        let table = PhaseTable::new(z, self.bandwidth());
        self.drift.eval_with(&table, out);
        let correction = self.lie_sum(fields, z, &table);
        for (o, c) in out.iter_mut().zip(&correction) {
            *o += 0.5 * c;
        }
    }

    /// `Σ_k L_{(X_k,…,X_k)} α_k(z)`.
    pub(crate) fn lie_sum(&self, fields: &VectorFieldSet, z: &[f64], table: &PhaseTable) -> Vec<f64> {
        let n = fields.dim();
        let input = z.len();
        let mut lifted = vec![0.0; self.d() * input];
        for p in 0..self.arity {
            let t = PhaseTable::new(&z[p * n..(p + 1) * n], fields.bandwidth());
            for k in 0..self.d() {
                fields.fields()[k + 1].eval_with(&t, &mut lifted[k * input + p * n..k * input + (p + 1) * n]);
            }
        }
        let mut out = vec![0.0; self.output_dim()];
        let mut jac = vec![0.0; self.output_dim() * input];
        self.lie_sum_from(table, &lifted, &mut jac, &mut out);
        out
    }

    /// As [`Self::lie_sum`] with `(X_k(z¹),…,X_k(zⁿ))` supplied at `lifted[k*nN..(k+1)*nN]`.
    pub(crate) fn lie_sum_from(&self, table: &PhaseTable, lifted: &[f64], jac: &mut [f64], out: &mut [f64]) {
        let input = self.drift.input_dim();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, alpha) in self.alpha.iter().enumerate() {
            let xk = &lifted[k * input..(k + 1) * input];
            alpha.jacobian_with(table, jac);
            for (i, o) in out.iter_mut().enumerate() {
                *o += jac[i * input..(i + 1) * input]
                    .iter()
                    .zip(xk)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
    }

    fn shifted(&self, alpha_shift: &[Vec<f64>], drift_shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, s) in alpha_shift.iter().enumerate() {
            out.alpha[k] = out.alpha[k].shifted(s);
            for (acc, v) in out.alpha_shift[k].iter_mut().zip(s) {
                *acc += v;
            }
        }
        out.drift = out.drift.shifted(drift_shift);
        for (acc, v) in out.drift_shift.iter_mut().zip(drift_shift) {
            *acc += v;
        }
        out.centered = true;
        out
    }
}

/// Reference measure for centering.
#[derive(Debug, Clone, Copy)]
pub enum CenteringMeasure<'a> {
    /// Lebesgue measure on `T^N` (the invariant measure of a divergence-free set).
    Lebesgue,
    /// A weighted particle approximation (e.g. a long-run occupation cloud).
    Weighted {
        points: &'a [Vec<f64>],
        weights: &'a [f64],
    },
}

/// Outcome of [`center_functional`]: the centered spec and the half-width of the
/// 95% interval on each subtracted constant (0 when computed exactly).
#[derive(Debug, Clone)]
pub struct Centering {
    pub spec: FunctionalSpec,
    pub half_width: f64,
    pub exact: bool,
}

/// Subtracts the constants that make the mean Itô drift vanish.
///
/// Arity ≥ 2: `∫ [a + ½ Σ_k L_{(X_k,…)} α_k] dμⁿ` is removed from `a`.
/// Arity 1: `∫ α_k dμ` is removed from each `α_k`, then `∫ [a + ½ Σ_k L_{X_k} α_k] dμ`
/// from `a`. Integrals over Lebesgue measure use an exact tensor grid when it
/// has at most `mc_samples` nodes and Monte Carlo otherwise.
pub fn center_functional(
    fields: &VectorFieldSet,
    spec: &FunctionalSpec,
    measure: CenteringMeasure<'_>,
    mc_samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Centering> {
    spec.check_against(fields)?;
    let q = spec.output_dim();
    let mut half_width: f64 = 0.0;
    let mut exact = true;
    let mut working = spec.clone();
    if spec.arity == 1 {
        let mut alpha_shift = Vec::with_capacity(spec.d());
        for alpha in &spec.alpha {
            let est = integrate(spec.arity, fields.dim(), alpha.bandwidth(), measure, mc_samples, seed, |z, out| {
                out.copy_from_slice(&alpha.eval(z));
            }, q)?;
            half_width = half_width.max(est.half_width);
            exact &= est.exact;
            alpha_shift.push(est.mean);
        }
        working = working.shifted(&alpha_shift, &vec![0.0; q]);
    }
    let bw = working.bandwidth() + fields.bandwidth();
    let est = integrate(working.arity, fields.dim(), bw, measure, mc_samples, seed ^ 0xA5A5, |z, out| {
        working.ito_drift(fields, z, out);
    }, q)?;
    half_width = half_width.max(est.half_width);
    exact &= est.exact;
    if half_width > tolerance {
        return Err(FlowError::CenteringPrecision {
            achieved: half_width,
            requested: tolerance,
        });
    }
    let spec = working.shifted(&vec![vec![0.0; q]; spec.d()], &est.mean);
    Ok(Centering {
        spec,
        half_width,
        exact,
    })
}

struct Estimate {
    mean: Vec<f64>,
    half_width: f64,
    exact: bool,
}

#[allow(clippy::too_many_arguments)]
fn integrate(
    arity: usize,
    dim: usize,
    bandwidth: i32,
    measure: CenteringMeasure<'_>,
    mc_samples: usize,
    seed: u64,
    f: impl Fn(&[f64], &mut [f64]),
    q: usize,
) -> Result<Estimate> {
    let total_dim = arity * dim;
    let mut out = vec![0.0; q];
    match measure {
        CenteringMeasure::Lebesgue => {
            let side = (bandwidth.max(0) as usize) + 1;
            let nodes = (side as f64).powi(total_dim as i32);
            if nodes <= mc_samples as f64 {
                let nodes = nodes as usize;
                let mut sum = vec![0.0; q];
                let mut z = vec![0.0; total_dim];
                for idx in 0..nodes {
                    let mut rem = idx;
                    for zj in z.iter_mut() {
                        *zj = (rem % side) as f64 / side as f64;
                        rem /= side;
                    }
                    f(&z, &mut out);
                    for (s, o) in sum.iter_mut().zip(&out) {
                        *s += o;
                    }
                }
                return Ok(Estimate {
                    mean: sum.into_iter().map(|s| s / nodes as f64).collect(),
                    half_width: 0.0,
                    exact: true,
                });
            }
            if mc_samples < 2 {
                return Err(FlowError::InsufficientSamples {
                    needed: 2,
                    have: mc_samples,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z = vec![0.0; total_dim];
            monte_carlo(mc_samples, q, &mut out, |out| {
                for zj in z.iter_mut() {
                    *zj = rng.gen::<f64>();
                }
                f(&z, out);
                1.0
            })
        }
        CenteringMeasure::Weighted { points, weights } => {
            if points.is_empty() || points.len() != weights.len() {
                return Err(FlowError::InvalidArgument("empty or mismatched centering cloud".into()));
            }
            let total: f64 = weights.iter().sum();
            if arity == 1 {
                let mut sum = vec![0.0; q];
                for (p, &w) in points.iter().zip(weights) {
                    f(p, &mut out);
                    for (s, o) in sum.iter_mut().zip(&out) {
                        *s += w * o;
                    }
                }
                return Ok(Estimate {
                    mean: sum.into_iter().map(|s| s / total).collect(),
                    half_width: 0.0,
                    exact: true,
                });
            }
            // product of the cloud with itself: sample tuples by weight
            let cumulative: Vec<f64> = weights
                .iter()
                .scan(0.0, |acc, &w| {
                    *acc += w / total;
                    Some(*acc)
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z = vec![0.0; total_dim];
            monte_carlo(mc_samples.max(2), q, &mut out, |out| {
                for p in 0..arity {
                    let u: f64 = rng.gen();
                    let idx = cumulative.partition_point(|&c| c < u).min(points.len() - 1);
                    z[p * dim..(p + 1) * dim].copy_from_slice(&points[idx]);
                }
                f(&z, out);
                1.0
            })
        }
    }
}

fn monte_carlo(
    samples: usize,
    q: usize,
    out: &mut [f64],
    mut draw: impl FnMut(&mut [f64]) -> f64,
) -> Result<Estimate> {
    let mut mean = vec![0.0; q];
    let mut m2 = vec![0.0; q];
    for i in 0..samples {
        draw(out);
        for c in 0..q {
            let delta = out[c] - mean[c];
            mean[c] += delta / (i + 1) as f64;
            m2[c] += delta * (out[c] - mean[c]);
        }
    }
    let n = samples as f64;
    let half_width = m2
        .iter()
        .map(|s| 1.96 * (s / (n - 1.0) / n).sqrt())
        .fold(0.0, f64::max);
    Ok(Estimate {
        mean,
        half_width,
        exact: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_field_set, shear_term, FieldSetSpec};
    use crate::trig::TrigTerm;
    use std::f64::consts::TAU;

    fn scalar(input: usize, terms: Vec<TrigTerm>) -> TrigMap {
        TrigMap::new(input, 1, terms).unwrap()
    }

    #[test]
    fn constant_drift_is_removed() {
        let set = make_field_set(&FieldSetSpec::random(2, 2, 1, 1, true)).unwrap();
        let spec = FunctionalSpec::new(
            2,
            vec![TrigMap::zero(4, 1); 2],
            TrigMap::constant(4, &[5.0]),
        )
        .unwrap();
        let c = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 10_000, 1e-9, 0).unwrap();
        assert!(c.exact);
        assert!(c.spec.centered);
        assert!(c.spec.drift.eval(&[0.1, 0.2, 0.3, 0.4])[0].abs() < 1e-14);
        assert_eq!(c.spec.drift_shift, vec![5.0]);
    }

    #[test]
    fn odd_mode_alpha_is_unchanged() {
        let set = make_field_set(&FieldSetSpec::random(2, 1, 1, 3, true)).unwrap();
        let alpha = scalar(2, vec![TrigTerm::scalar(vec![1, 0], 0.0, 1.0)]);
        let spec = FunctionalSpec::new(1, vec![alpha.clone()], TrigMap::zero(2, 1)).unwrap();
        let c = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 10_000, 1e-9, 0).unwrap();
        assert!(c.spec.alpha_shift[0][0].abs() < 1e-15);
        for x in [[0.1, 0.3], [0.7, 0.2]] {
            assert!((c.spec.alpha[0].eval(&x)[0] - alpha.eval(&x)[0]).abs() < 1e-15);
        }
    }

    /// Tensor-grid quadrature on a 256^N grid, written independently of the
    /// centering code path.
    fn grid_mean(f: impl Fn(&[f64]) -> f64, dim: usize, side: usize) -> f64 {
        let total = side.pow(dim as u32);
        let mut sum = 0.0;
        let mut x = vec![0.0; dim];
        for idx in 0..total {
            let mut rem = idx;
            for xj in x.iter_mut() {
                *xj = (rem % side) as f64 / side as f64 + 0.5 / side as f64;
                rem /= side;
            }
            sum += f(&x);
        }
        sum / total as f64
    }

    #[test]
    fn arity_one_constant_matches_quadrature_with_compressible_field() {
        // X1 = (sin 2πx₁, 0.3 cos 2πx₂) is not divergence-free, so ∫ L_{X1} α dx ≠ 0
        let x1 = vec![
            shear_term(2, 0, 0, 1.0),
            TrigTerm::new(vec![0, 1], vec![0.0, 0.3], vec![0.0, 0.0]),
        ];
        let set = make_field_set(&FieldSetSpec::explicit(2, vec![vec![], x1], false)).unwrap();
        let alpha = scalar(2, vec![TrigTerm::scalar(vec![1, 0], 1.0, 0.0)]);
        let drift = scalar(2, vec![TrigTerm::scalar(vec![0, 1], 0.4, 0.2)]);
        let spec = FunctionalSpec::new(1, vec![alpha], drift).unwrap();
        let exact = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 1_000, 1e-9, 0).unwrap();
        // oracle: a + ½ X1·∇α with α = cos 2πx₁ → ½ sin(2πx₁)(−2π sin 2πx₁) = −π sin² → mean −π/2
        let oracle = grid_mean(
            |x| {
                let a = 0.4 * (TAU * x[1]).cos() + 0.2 * (TAU * x[1]).sin();
                let lie = (TAU * x[0]).sin() * (-TAU * (TAU * x[0]).sin());
                a + 0.5 * lie
            },
            2,
            256,
        );
        assert!((oracle + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((exact.spec.drift_shift[0] - oracle).abs() < 1e-12);
        // the Monte Carlo route agrees within its interval
        let mc = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 1, f64::INFINITY, 0);
        assert!(mc.is_err());
        let spec3 = FunctionalSpec::new(1, spec.alpha.clone(), spec.drift.clone()).unwrap();
        let weights = vec![1.0; 4096];
        let pts: Vec<Vec<f64>> = (0..4096).map(|i| vec![(i % 64) as f64 / 64.0, (i / 64) as f64 / 64.0]).collect();
        let cloud = center_functional(
            &set,
            &spec3,
            CenteringMeasure::Weighted { points: &pts, weights: &weights },
            0,
            1e-9,
            0,
        )
        .unwrap();
        assert!((cloud.spec.drift_shift[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_precision_gate() {
        let set = make_field_set(&FieldSetSpec::random(2, 2, 2, 3, true)).unwrap();
        let drift = TrigMap::new(
            6,
            1,
            vec![TrigTerm::scalar(vec![1, 0, 2, 0, 1, 1], 1.0, 0.5)],
        )
        .unwrap();
        let spec = FunctionalSpec::new(3, vec![TrigMap::zero(6, 1); 2], drift).unwrap();
        let err = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 1000, 1e-6, 0).unwrap_err();
        assert!(matches!(err, FlowError::CenteringPrecision { .. }));
        let ok = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 4_000, 0.1, 0).unwrap();
        assert!(!ok.exact && ok.half_width < 0.1);
        assert!(ok.spec.drift_shift[0].abs() < ok.half_width * 3.0);
    }

    #[test]
    fn constant_alpha_is_forced_to_zero() {
        let set = make_field_set(&FieldSetSpec::random(2, 2, 1, 9, true)).unwrap();
        let spec = FunctionalSpec::new(
            1,
            vec![TrigMap::constant(2, &[0.7]), TrigMap::constant(2, &[-1.3])],
            TrigMap::zero(2, 1),
        )
        .unwrap();
        let c = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 100, 1e-12, 0).unwrap();
        for a in &c.spec.alpha {
            assert!(a.eval(&[0.3, 0.4])[0].abs() < 1e-15);
        }
        assert!(c.spec.drift_shift[0].abs() < 1e-15);
    }

    #[test]
    fn displacement_of_divergence_free_set_needs_no_centering() {
        let set = make_field_set(&FieldSetSpec { drift_amplitude: 0.5, ..FieldSetSpec::random(2, 3, 1, 42, true) }).unwrap();
        let spec = FunctionalSpec::displacement(&set);
        let c = center_functional(&set, &spec, CenteringMeasure::Lebesgue, 10_000, 1e-9, 0).unwrap();
        for s in c.spec.alpha_shift.iter().chain(std::iter::once(&c.spec.drift_shift)) {
            assert!(s.iter().all(|v| v.abs() < 1e-12), "{s:?}");
        }
    }
}

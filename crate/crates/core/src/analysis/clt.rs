//! Normality of additive functionals and displacement measures, and the
//! diffusivity `D(A)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{
    bootstrap_ci, ks_normal, linear_fit, t_quantile, weighted_moments, welch_anova, Estimate, Verdict, WelchTest,
};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve, grid_index, FunctionalSpec, Integrator};
use crate::measures::{displacement_sample, neumaier, pushforward_between, ParticleMeasure};

/// `c` in the 1% Kolmogorov-Smirnov critical value `c/√n`.
pub const KS_CRITICAL_1PCT: f64 = 1.63;
pub const SKEWNESS_GATE: f64 = 0.1;
pub const KURTOSIS_GATE: f64 = 0.2;
/// Smallest effective sample size accepted by [`normality_report`].
pub const MIN_EFFECTIVE_SIZE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub effective_size: f64,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Distance to `N(mean, variance)`.
    pub ks: f64,
    pub ks_critical: f64,
    pub ks_pass: bool,
    pub skewness_pass: bool,
    pub kurtosis_pass: bool,
}

impl CltReport {
    pub fn passes(&self) -> bool {
        self.ks_pass && self.skewness_pass && self.kurtosis_pass
    }
}

fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() != n => Err(FlowError::InvalidArgument("values/weights length mismatch".into())),
        Some(w) if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().all(|v| *v == 0.0) => {
            Err(FlowError::InvalidArgument("weights must be nonnegative, finite and not all zero".into()))
        }
        Some(w) => Ok(w.to_vec()),
    }
}

fn effective_size(w: &[f64]) -> f64 {
    let s = neumaier(w.iter().copied());
    s * s / neumaier(w.iter().map(|v| v * v))
}

/// Moments and Kolmogorov-Smirnov distance of a weighted scalar sample
/// against the normal law with the sample's own mean and variance.
pub fn normality_report(values: &[f64], weights: Option<&[f64]>) -> Result<CltReport> {
    let w = check_weights(values.len(), weights)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::InvalidArgument("non-finite sample value".into()));
    }
    let ess = effective_size(&w);
    if ess < MIN_EFFECTIVE_SIZE {
        return Err(FlowError::InsufficientSamples {
            needed: MIN_EFFECTIVE_SIZE as usize,
            have: ess as usize,
        });
    }
    let (mean, m2, m3, m4) = weighted_moments(values, &w);
    if !(m2 > 1e-300) || values.iter().all(|v| *v == values[0]) {
        return Err(FlowError::Degenerate("zero-variance sample".into()));
    }
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let ks = ks_normal(values, &w, mean, m2.sqrt());
    let ks_critical = KS_CRITICAL_1PCT / ess.sqrt();
    Ok(CltReport {
        n: values.len(),
        effective_size: ess,
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        ks,
        ks_critical,
        ks_pass: ks < ks_critical,
        skewness_pass: skewness.abs() <= SKEWNESS_GATE,
        kurtosis_pass: excess_kurtosis.abs() <= KURTOSIS_GATE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorCltReport {
    pub coordinates: Vec<CltReport>,
    pub covariance: Vec<Vec<f64>>,
    /// Standard errors of the covariance entries.
    pub covariance_se: Vec<Vec<f64>>,
}

impl VectorCltReport {
    pub fn passes(&self) -> bool {
        self.coordinates.iter().all(CltReport::passes)
    }

    pub fn ks_passes(&self) -> bool {
        self.coordinates.iter().all(|c| c.ks_pass)
    }

    /// Entries coupling different groups of `group` consecutive coordinates,
    /// as `(i, j, covariance / se)`.
    pub fn cross_group_z(&self, group: usize) -> Vec<(usize, usize, f64)> {
        let q = self.covariance.len();
        let mut out = Vec::new();
        for i in 0..q {
            for j in (i + 1)..q {
                if i / group != j / group {
                    out.push((i, j, self.covariance[i][j] / self.covariance_se[i][j]));
                }
            }
        }
        out
    }
}

/// Per-coordinate reports and the covariance matrix of a weighted vector sample.
pub fn normality_report_vector(samples: &[Vec<f64>], weights: Option<&[f64]>) -> Result<VectorCltReport> {
    let w = check_weights(samples.len(), weights)?;
    let q = samples.first().map_or(0, Vec::len);
    if q == 0 || samples.iter().any(|s| s.len() != q) {
        return Err(FlowError::InvalidArgument("vector samples must share a positive length".into()));
    }
    let columns: Vec<Vec<f64>> = (0..q).map(|c| samples.iter().map(|s| s[c]).collect()).collect();
    let coordinates = columns
        .iter()
        .map(|c| normality_report(c, Some(&w)))
        .collect::<Result<Vec<_>>>()?;
    let total = neumaier(w.iter().copied());
    let ess = effective_size(&w);
    let mut covariance = vec![vec![0.0; q]; q];
    let mut covariance_se = vec![vec![0.0; q]; q];
    for i in 0..q {
        for j in i..q {
            let (mi, mj) = (coordinates[i].mean, coordinates[j].mean);
            let prods: Vec<f64> = columns[i].iter().zip(&columns[j]).map(|(a, b)| (a - mi) * (b - mj)).collect();
            let cov = neumaier(prods.iter().zip(&w).map(|(p, wk)| p * wk)) / total;
            let var = neumaier(prods.iter().zip(&w).map(|(p, wk)| wk * (p - cov).powi(2))) / total;
            let se = (var / ess).sqrt();
            covariance[i][j] = cov;
            covariance[j][i] = cov;
            covariance_se[i][j] = se;
            covariance_se[j][i] = se;
        }
    }
    Ok(VectorCltReport {
        coordinates,
        covariance,
        covariance_se,
    })
}

/// Normality of `A_t/√t` for a joint functional of the n-point motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpointCltReport {
    pub horizons: Vec<f64>,
    pub reports: Vec<VectorCltReport>,
    /// Estimated drift `v = E A_t / t` at the largest horizon.
    pub drift: Vec<f64>,
    pub reps: usize,
    pub verdict: Verdict,
}

/// Runs `reps` realizations of the n-point motion from `points` and reports on
/// `A_t/√t` at each horizon. Arity-1 functionals contribute one block per
/// point; their cross-point covariances are part of the report.
pub fn clt_npoint(
    fields: &VectorFieldSet,
    params: &PathParams,
    functional: &FunctionalSpec,
    points: &[Vec<f64>],
    horizons: &[f64],
    reps: usize,
) -> Result<NpointCltReport> {
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(FlowError::InvalidArgument("horizons must be positive and increasing".into()));
    }
    let t_final = *horizons.last().expect("nonempty");
    let runs: Vec<Vec<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t_final)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme).with_functionals(vec![functional.clone()])?;
            let mut st = integ.initial_state(points, 0.0, params.dt, None)?;
            horizons
                .iter()
                .map(|&t| {
                    evolve(&mut integ, &mut st, &path, t)?;
                    Ok(st.functionals[0].values.clone())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(horizons.len());
    for (h, &t) in horizons.iter().enumerate() {
        let sample: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| r[h].iter().map(|a| a / t.sqrt()).collect())
            .collect();
        reports.push(normality_report_vector(&sample, None)?);
    }
    let last = horizons.len() - 1;
    let width = runs[0][last].len();
    let drift = (0..width)
        .map(|c| neumaier(runs.iter().map(|r| r[last][c])) / (reps as f64 * t_final))
        .collect();
    let mut verdict = Verdict::from_pass(reports.iter().all(VectorCltReport::ks_passes) && reports[last].passes());
    if functional.arity == 1 && points.len() > 1 {
        let independent = reports[last]
            .cross_group_z(functional.output_dim())
            .iter()
            .all(|(_, _, z)| z.abs() <= 3.0);
        verdict = verdict.and(Verdict::from_pass(independent));
    }
    Ok(NpointCltReport {
        horizons: horizons.to_vec(),
        reports,
        drift,
        reps,
        verdict,
    })
}

/// Displacement statistics of `ν_t` for several fixed noise realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureCltReport {
    pub t: f64,
    /// Mean displacement rate over all particles and realizations.
    pub drift: Vec<f64>,
    pub realizations: Vec<VectorCltReport>,
    /// Per-realization, per-coordinate variance of the normalized displacement,
    /// with a standard error from time-block batch means.
    pub variances: Vec<Vec<Estimate>>,
    /// Per-coordinate Welch test that the realizations share one variance.
    pub variance_homogeneity: Vec<WelchTest>,
    /// Mean covariance of the first coordinate between particle `i` and
    /// particle `i + n/2`, with its standard error across realizations.
    pub cross_covariance: Estimate,
    pub verdict: Verdict,
}

/// Number of time blocks behind the standard error of a per-realization variance.
pub const TIME_BLOCKS: usize = 10;

/// For each realization, pushes `ν` forward to `t` and tests the normalized
/// displacement sample; then checks that the per-realization variances agree
/// and that displacements of distinct particles are uncorrelated.
///
/// All particles of one realization share the noise, so the uncertainty of its
/// variance is estimated from the spread of the same statistic over
/// [`TIME_BLOCKS`] consecutive time blocks rather than from the particle count.
pub fn clt_measure(
    fields: &VectorFieldSet,
    params: &PathParams,
    nu: &ParticleMeasure,
    t: f64,
    realizations: usize,
) -> Result<MeasureCltReport> {
    if realizations < 2 {
        return Err(FlowError::InsufficientSamples {
            needed: 2,
            have: realizations,
        });
    }
    let n = nu.dim();
    let steps = grid_index(t, params.dt)?;
    if steps < TIME_BLOCKS as i64 {
        return Err(FlowError::InvalidArgument(format!("t = {t} too short for {TIME_BLOCKS} time blocks")));
    }
    let bounds: Vec<f64> = (0..=TIME_BLOCKS)
        .map(|j| (j as i64 * steps / TIME_BLOCKS as i64) as f64 * params.dt)
        .collect();
    let mut clouds = Vec::with_capacity(realizations);
    let mut block_vars = Vec::with_capacity(realizations);
    for rep in 0..realizations as u64 {
        let path = params.path(fields.d(), rep, 0.0, t)?;
        let mut cloud = nu.clone();
        let mut per_block = Vec::with_capacity(TIME_BLOCKS);
        for w in bounds.windows(2) {
            let next = pushforward_between(fields, &cloud, &path, params.scheme, w[0], w[1])?;
            let len = w[1] - w[0];
            per_block.push(
                (0..n)
                    .map(|i| {
                        let inc: Vec<f64> = next
                            .particles
                            .iter()
                            .zip(&cloud.particles)
                            .map(|(a, b)| (a.lift[i] - b.lift[i]) / len.sqrt())
                            .collect();
                        weighted_moments(&inc, &nu.weights).1
                    })
                    .collect::<Vec<f64>>(),
            );
            cloud = next;
        }
        block_vars.push(per_block);
        clouds.push(cloud);
    }
    let zero = vec![0.0; n];
    let mut samples = Vec::with_capacity(realizations);
    for c in &clouds {
        samples.push(displacement_sample(c, &zero, t)?);
    }
    let total_w: f64 = realizations as f64 * nu.total_mass();
    let drift: Vec<f64> = (0..n)
        .map(|i| {
            neumaier(samples.iter().flat_map(|(s, w)| s.iter().zip(w).map(move |(x, wk)| x[i] * wk)))
                / total_w
                / t.sqrt()
        })
        .collect();
    let mut reports = Vec::with_capacity(realizations);
    for (s, w) in &samples {
        reports.push(normality_report_vector(s, Some(w))?);
    }
    let variances: Vec<Vec<Estimate>> = reports
        .iter()
        .zip(&block_vars)
        .map(|(r, blocks)| {
            (0..n)
                .map(|i| {
                    let b: Vec<f64> = blocks.iter().map(|v| v[i]).collect();
                    let se = Estimate::from_replicates(&b).map_or(f64::INFINITY, |e| e.se);
                    Estimate::with_quantile(r.coordinates[i].variance, se, t_quantile(TIME_BLOCKS - 1))
                })
                .collect()
        })
        .collect();
    let variance_homogeneity: Vec<WelchTest> = (0..n)
        .map(|i| {
            let v: Vec<Estimate> = variances.iter().map(|r| r[i]).collect();
            welch_anova(&v, TIME_BLOCKS - 1)
        })
        .collect::<Result<_>>()?;
    let half = nu.len() / 2;
    let per_real: Vec<f64> = samples
        .iter()
        .zip(&reports)
        .map(|((s, w), r)| {
            let m = r.coordinates[0].mean;
            let num = neumaier((0..half).map(|i| (w[i] * w[i + half]).sqrt() * (s[i][0] - m) * (s[i + half][0] - m)));
            let den = neumaier((0..half).map(|i| (w[i] * w[i + half]).sqrt()));
            num / den
        })
        .collect();
    let cross_covariance = Estimate::from_replicates(&per_real)?;
    let ks_ok = reports.iter().all(VectorCltReport::ks_passes);
    let homogeneous = variance_homogeneity.iter().all(WelchTest::passes);
    let uncorrelated = cross_covariance.value.abs() <= 3.0 * cross_covariance.se;
    Ok(MeasureCltReport {
        t,
        drift,
        realizations: reports,
        variances,
        variance_homogeneity,
        cross_covariance,
        verdict: Verdict::from_pass(ks_ok && homogeneous && uncorrelated),
    })
}

/// Two estimates of the diffusivity `D(A)` of a centered arity-1 functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaEstimate {
    /// Slope of `E_x A_t²` against `t`, per output component.
    pub slope: Vec<Estimate>,
    /// `E_ν A_T² / T` at the largest horizon, per output component.
    pub per_measure: Vec<Estimate>,
    pub horizons: Vec<f64>,
    pub reps: usize,
    /// The two estimates agree within their joint 95% interval for every component.
    pub agree: bool,
}

/// `D(A)` from `reps` runs started at `x0` (regression of the second moment on
/// the horizon, bootstrap interval) and from `reps` runs started at the points
/// of `starts` in turn (second moment over the largest horizon).
pub fn estimate_da(
    fields: &VectorFieldSet,
    params: &PathParams,
    functional: &FunctionalSpec,
    x0: &[f64],
    starts: &[Vec<f64>],
    horizons: &[f64],
    reps: usize,
) -> Result<DaEstimate> {
    if functional.arity != 1 {
        return Err(FlowError::InvalidArgument("D(A) needs an arity-1 functional".into()));
    }
    if horizons.len() < 3 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FlowError::InvalidArgument("need at least 3 increasing horizons".into()));
    }
    if starts.is_empty() || reps < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: reps });
    }
    let q = functional.output_dim();
    let t_final = *horizons.last().expect("nonempty");
    let run = |rep: u64, x: &[f64], all: bool| -> Result<Vec<Vec<f64>>> {
        let path = params.path(fields.d(), rep, 0.0, t_final)?;
        let mut integ = Integrator::new(fields.clone(), params.scheme).with_functionals(vec![functional.clone()])?;
        let mut st = integ.initial_state(&[x.to_vec()], 0.0, params.dt, None)?;
        let mut out = Vec::new();
        for &t in horizons.iter().filter(|&&t| all || t == t_final) {
            evolve(&mut integ, &mut st, &path, t)?;
            out.push(st.functionals[0].values.iter().map(|a| a * a).collect());
        }
        Ok(out)
    };
    let squares: Vec<Vec<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| run(rep, x0, true))
        .collect::<Result<_>>()?;
    let spread: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| Ok(run(reps as u64 + rep, &starts[rep as usize % starts.len()], false)?.remove(0)))
        .collect::<Result<_>>()?;
    let slope_of = |rows: &[Vec<Vec<f64>>], c: usize| -> Option<f64> {
        let m = rows.len() as f64;
        let means: Vec<f64> = (0..horizons.len())
            .map(|h| neumaier(rows.iter().map(|r| r[h][c])) / m)
            .collect();
        linear_fit(horizons, &means).ok().map(|f| f.slope)
    };
    let mut slope = Vec::with_capacity(q);
    let mut per_measure = Vec::with_capacity(q);
    let mut agree = true;
    for c in 0..q {
        let value = slope_of(&squares, c).unwrap_or(0.0);
        let ci = bootstrap_ci(&squares, 200, params.seed ^ c as u64, |s| slope_of(s, c)).unwrap_or((value, value));
        let s = Estimate {
            value,
            se: (ci.1 - ci.0) / (2.0 * 1.96),
            ci,
        };
        let pm = Estimate::from_replicates(&spread.iter().map(|r| r[c] / t_final).collect::<Vec<_>>())?;
        agree &= (s.value - pm.value).abs() <= 1.96 * (s.se.powi(2) + pm.se.powi(2)).sqrt();
        slope.push(s);
        per_measure.push(pm);
    }
    Ok(DaEstimate {
        slope,
        per_measure,
        horizons: horizons.to_vec(),
        reps,
        agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_atom_sample() {
        let v: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let r = normality_report(&v, None).unwrap();
        assert!(r.skewness.abs() < 1e-12);
        assert!((r.excess_kurtosis + 2.0).abs() < 1e-12);
        assert!(!r.ks_pass && !r.kurtosis_pass);
    }

    #[test]
    fn gaussian_draws_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = normality_report(&v, None).unwrap();
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn constant_and_small_samples_rejected() {
        assert!(matches!(normality_report(&[3.0; 500], None), Err(FlowError::Degenerate(_))));
        assert!(matches!(
            normality_report(&[1.0, 2.0, 3.0], None),
            Err(FlowError::InsufficientSamples { .. })
        ));
        // 1000 values but nearly all weight on one of them
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        let mut w = vec![1e-6; 1000];
        w[0] = 1.0;
        assert!(matches!(normality_report(&v, Some(&w)), Err(FlowError::InsufficientSamples { .. })));
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..1000).map(|i| 1.0 + (i % 7) as f64).collect();
        let w3: Vec<f64> = w.iter().map(|x| 0.125 * x).collect();
        let a = normality_report(&v, Some(&w)).unwrap();
        let b = normality_report(&v, Some(&w3)).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-14 && (a.variance - b.variance).abs() < 1e-14);
        assert!((a.skewness - b.skewness).abs() < 1e-12 && (a.ks - b.ks).abs() < 1e-14);
        assert!((a.effective_size - b.effective_size).abs() < 1e-9);
    }

    #[test]
    fn independent_coordinates_have_small_cross_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<Vec<f64>> = (0..5000)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = normality_report_vector(&s, None).unwrap();
        assert!(r.cross_group_z(2).iter().all(|(_, _, z)| z.abs() < 4.0));
        assert!((r.covariance[0][0] - r.coordinates[0].variance).abs() < 1e-12);
    }

    #[test]
    fn zero_functional_has_zero_diffusivity() {
        let f = crate::fields::make_field_set(&crate::fields::FieldSetSpec::random(2, 3, 1, 42, true)).unwrap();
        let zero = FunctionalSpec::zero(1, 2, 3, 1);
        let e = estimate_da(
            &f,
            &PathParams::new(0, 0.01),
            &zero,
            &[0.1, 0.2],
            &[vec![0.3, 0.3]],
            &[1.0, 2.0, 3.0],
            8,
        )
        .unwrap();
        assert_eq!(e.slope[0].value, 0.0);
        assert_eq!(e.per_measure[0].value, 0.0);
    }
}

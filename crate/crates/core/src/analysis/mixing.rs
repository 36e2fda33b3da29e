//! Correlation decay `ρ_{z,B}(t) = E_z B(z_t)` of the two-point motion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{fit_exponential, linear_fit, DecayFit};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve, grid_index, Integrator};
use crate::measures::neumaier;
use crate::torus::distance;
use crate::trig::TrigMap;

/// Minimum number of significant points in a decay fit.
const MIN_FIT_POINTS: usize = 4;
/// Points with `|ρ| ≤ SIGNIFICANCE · se` end the fit window.
const SIGNIFICANCE: f64 = 3.0;

/// Monte Carlo estimate of `t ↦ E_z B(z_t)` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub reps: usize,
    /// Initial distance `d(x, y)`.
    pub separation: f64,
}

/// Curves for each observable from `reps` two-point runs started at `(x, y)`,
/// sampled every `every` time units up to `t_final`.
pub fn correlation_decay(
    fields: &VectorFieldSet,
    params: &PathParams,
    observables: &[TrigMap],
    x: &[f64],
    y: &[f64],
    t_final: f64,
    every: f64,
    reps: usize,
) -> Result<Vec<CorrelationCurve>> {
    let n = fields.dim();
    for b in observables {
        if b.input_dim() != 2 * n || b.output_dim() != 1 {
            return Err(FlowError::InvalidArgument("observable must be scalar on T^N × T^N".into()));
        }
        if b.mean()[0].abs() > 1e-14 {
            return Err(FlowError::InvalidArgument("observable must have zero product mean".into()));
        }
    }
    let separation = distance(x, y);
    if separation == 0.0 {
        return Err(FlowError::OnDiagonal(0, 1));
    }
    if reps < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: reps });
    }
    let per = grid_index(every, params.dt)?;
    let samples = (grid_index(t_final, params.dt)? / per) as usize;
    let times: Vec<f64> = (0..=samples).map(|i| (i as i64 * per) as f64 * params.dt).collect();
    let runs: Vec<Vec<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t_final)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme);
            let mut st = integ.initial_state(&[x.to_vec(), y.to_vec()], 0.0, params.dt, None)?;
            let mut rows = Vec::with_capacity(times.len());
            for (i, &t) in times.iter().enumerate() {
                if i > 0 {
                    evolve(&mut integ, &mut st, &path, t)?;
                }
                let z = st.torus_coords();
                rows.push(observables.iter().map(|b| b.eval(&z)[0]).collect());
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let m = reps as f64;
    Ok((0..observables.len())
        .map(|o| {
            let (mean, se) = (0..times.len())
                .map(|i| {
                    let mu = neumaier(runs.iter().map(|r| r[i][o])) / m;
                    let var = neumaier(runs.iter().map(|r| (r[i][o] - mu).powi(2))) / (m - 1.0);
                    (mu, (var / m).sqrt())
                })
                .unzip();
            CorrelationCurve {
                times: times.clone(),
                mean,
                se,
                reps,
                separation,
            }
        })
        .collect())
}

/// Fit window: from the first time the curve has fallen to half its peak
/// magnitude until just before it stops being significant or changes sign.
fn fit_window(c: &CorrelationCurve) -> Option<std::ops::Range<usize>> {
    let (peak_at, peak) = c
        .mean
        .iter()
        .map(|v| v.abs())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if peak == 0.0 {
        return None;
    }
    let start = (peak_at..c.mean.len()).find(|&i| c.mean[i].abs() <= 0.5 * peak)?;
    let sign = c.mean[start].signum();
    let end = (start..c.mean.len())
        .find(|&i| c.mean[i].abs() <= SIGNIFICANCE * c.se[i] || c.mean[i].signum() != sign)
        .unwrap_or(c.mean.len());
    (end >= start + MIN_FIT_POINTS).then_some(start..end)
}

/// `C e^{−θt}` fitted on the significant decaying part of the curve. A curve
/// that never decays to half its peak is rejected rather than fitted.
pub fn fit_correlation(curve: &CorrelationCurve) -> Result<DecayFit> {
    let w = fit_window(curve)
        .ok_or_else(|| FlowError::Degenerate("correlation curve shows no significant decay".into()))?;
    let abs: Vec<f64> = curve.mean[w.clone()].iter().map(|v| v.abs()).collect();
    fit_exponential(&curve.times[w], &abs)
}

/// Dependence of the decay prefactor on the initial separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationFit {
    /// Common rate used to compare prefactors.
    pub theta: f64,
    pub separations: Vec<f64>,
    pub log_amplitudes: Vec<f64>,
    /// Exponent `p` in `C(d) ∝ d^{−p}` from the regression over all separations.
    pub p: Option<f64>,
    pub p_ci: Option<(f64, f64)>,
    /// `p` between consecutive separations.
    pub local_p: Vec<f64>,
}

impl SeparationFit {
    /// The prefactor falls as the separation grows: `p > 0` at 95%.
    pub fn decreasing(&self) -> bool {
        self.p_ci.is_some_and(|ci| ci.0 > 0.0)
    }
}

/// Prefactors `C(d)` of curves at increasing separations, at a common rate `θ`
/// (the mean of the per-curve fitted rates).
pub fn separation_exponent(curves: &[CorrelationCurve]) -> Result<SeparationFit> {
    let mut fits = Vec::new();
    for c in curves {
        let w = fit_window(c).ok_or_else(|| {
            FlowError::Degenerate(format!("no decay at separation {}", c.separation))
        })?;
        fits.push((c, w, fit_correlation(c)?));
    }
    if fits.len() < 2 {
        return Err(FlowError::InsufficientSamples {
            needed: 2,
            have: fits.len(),
        });
    }
    let theta = fits.iter().map(|f| f.2.rate).sum::<f64>() / fits.len() as f64;
    let log_amplitudes: Vec<f64> = fits
        .iter()
        .map(|(c, w, _)| {
            let vals: Vec<f64> = w.clone().map(|i| c.mean[i].abs().ln() + theta * c.times[i]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let separations: Vec<f64> = curves.iter().map(|c| c.separation).collect();
    let log_d: Vec<f64> = separations.iter().map(|d| d.ln()).collect();
    let local_p = log_amplitudes
        .windows(2)
        .zip(log_d.windows(2))
        .map(|(a, d)| -(a[1] - a[0]) / (d[1] - d[0]))
        .collect();
    let fit = linear_fit(&log_d, &log_amplitudes).ok();
    Ok(SeparationFit {
        theta,
        separations,
        log_amplitudes,
        p: fit.map(|f| -f.slope),
        p_ci: fit.map(|f| (-f.slope_ci.1, -f.slope_ci.0)),
        local_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trig::TrigTerm;

    /// `cos 2π(x₁ − y₁)` on `T² × T²`.
    fn relative_cos() -> TrigMap {
        TrigMap::new(4, 1, vec![TrigTerm::scalar(vec![1, 0, -1, 0], 1.0, 0.0)]).unwrap()
    }

    #[test]
    fn zero_observable_gives_zero_curve() {
        let f = VectorFieldSet::zero(2, 1);
        let curves = correlation_decay(
            &f,
            &PathParams::new(1, 0.01),
            &[TrigMap::zero(4, 1)],
            &[0.1, 0.1],
            &[0.4, 0.2],
            1.0,
            0.1,
            4,
        )
        .unwrap();
        assert!(curves[0].mean.iter().all(|v| *v == 0.0));
        assert!(fit_correlation(&curves[0]).is_err());
    }

    #[test]
    fn constant_fields_do_not_mix() {
        let f = VectorFieldSet::constant(2, &[vec![0.0, 0.0], vec![0.3, 0.1]]).unwrap();
        let curves = correlation_decay(
            &f,
            &PathParams::new(1, 0.01),
            &[relative_cos()],
            &[0.1, 0.1],
            &[0.2, 0.1],
            5.0,
            0.1,
            8,
        )
        .unwrap();
        let c = &curves[0];
        assert!(c.mean.iter().all(|v| (v - c.mean[0]).abs() < 1e-9));
        assert!(matches!(fit_correlation(c), Err(FlowError::Degenerate(_))));
    }

    #[test]
    fn rejects_nonzero_mean_and_diagonal_start() {
        let f = VectorFieldSet::zero(2, 1);
        let p = PathParams::new(1, 0.01);
        let shifted = TrigMap::constant(4, &[0.5]);
        assert!(correlation_decay(&f, &p, &[shifted], &[0.1, 0.1], &[0.3, 0.1], 1.0, 0.1, 4).is_err());
        assert!(correlation_decay(&f, &p, &[relative_cos()], &[0.1, 0.1], &[0.1, 0.1], 1.0, 0.1, 4).is_err());
    }

    fn synthetic(separation: f64, amplitude: f64, rate: f64) -> CorrelationCurve {
        let times: Vec<f64> = (0..60).map(|i| i as f64 * 0.5).collect();
        let mean: Vec<f64> = times.iter().map(|t| (amplitude * (-rate * t).exp()).min(1.0)).collect();
        CorrelationCurve {
            se: vec![1e-4; times.len()],
            times,
            mean,
            reps: 100,
            separation,
        }
    }

    #[test]
    fn fit_recovers_rate_after_plateau() {
        let c = synthetic(0.01, 50.0, 0.3);
        let f = fit_correlation(&c).unwrap();
        assert!((f.rate - 0.3).abs() < 1e-9 && f.r2 > 0.999);
    }

    #[test]
    fn prefactor_power_law_is_recovered() {
        let curves: Vec<CorrelationCurve> =
            [0.01, 0.02, 0.04].iter().map(|&d: &f64| synthetic(d, 2.0 * d.powf(-0.8), 0.3)).collect();
        let s = separation_exponent(&curves).unwrap();
        assert!((s.p.unwrap() - 0.8).abs() < 1e-6, "{:?}", s);
    }
}

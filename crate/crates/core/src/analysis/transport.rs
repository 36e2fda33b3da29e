//! Statistics of transported particle clouds: p-energy along the flow and
//! decay of observable averages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{fit_exponential, linear_fit, weighted_moments, DecayFit, Estimate, Verdict};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::measures::{p_energy, pushforward_between, ParticleMeasure};
use crate::trig::TrigMap;

/// Points below this multiple of the finite-cloud floor end a decay fit.
const FLOOR_MULTIPLE: f64 = 3.0;

fn check_times(times: &[f64]) -> Result<()> {
    if times.len() < 3 || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
        return Err(FlowError::InvalidArgument("need at least 3 increasing nonnegative times".into()));
    }
    Ok(())
}

/// Runs each realization through `times`, calling `stat` on the cloud at each.
fn along_times<T: Send>(
    fields: &VectorFieldSet,
    params: &PathParams,
    nu: &ParticleMeasure,
    times: &[f64],
    reps: usize,
    stat: impl Fn(&ParticleMeasure) -> Result<T> + Sync,
) -> Result<Vec<Vec<T>>> {
    let t_final = *times.last().expect("checked");
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t_final)?;
            let mut cloud = nu.clone();
            let mut now = 0.0;
            let mut out = Vec::with_capacity(times.len());
            for &t in times {
                if t > now {
                    cloud = pushforward_between(fields, &cloud, &path, params.scheme, now, t)?;
                    now = t;
                }
                out.push(stat(&cloud)?);
            }
            Ok(out)
        })
        .collect()
}

fn column_estimates(runs: &[Vec<f64>], len: usize) -> Result<Vec<Estimate>> {
    (0..len)
        .map(|i| Estimate::from_replicates(&runs.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub p: f64,
    pub initial: f64,
    pub times: Vec<f64>,
    /// `E I_p(ν_t)` per time.
    pub mean: Vec<Estimate>,
    /// Smallest `C` with `E I_p(ν_t) ≤ I_p(ν) + C` over the sampled times.
    pub bound_constant: f64,
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub reps: usize,
    pub verdict: Verdict,
}

/// Mean p-energy of the transported cloud over time, with a check that it has
/// no significantly positive trend.
pub fn energy_trend(
    fields: &VectorFieldSet,
    params: &PathParams,
    nu: &ParticleMeasure,
    p: f64,
    times: &[f64],
    reps: usize,
) -> Result<EnergyReport> {
    check_times(times)?;
    if reps < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: reps });
    }
    let initial = p_energy(nu, p)?;
    if !initial.is_finite() {
        return Err(FlowError::InvalidArgument("initial cloud has infinite energy".into()));
    }
    let runs = along_times(fields, params, nu, times, reps, |c| p_energy(c, p))?;
    let mean = column_estimates(&runs, times.len())?;
    let values: Vec<f64> = mean.iter().map(|e| e.value).collect();
    let fit = linear_fit(times, &values)?;
    let bound_constant = values.iter().map(|v| v - initial).fold(0.0, f64::max);
    Ok(EnergyReport {
        p,
        initial,
        times: times.to_vec(),
        mean,
        bound_constant,
        slope: fit.slope,
        slope_ci: fit.slope_ci,
        reps,
        verdict: Verdict::from_pass(fit.slope_ci.0 <= 0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquidistributionReport {
    pub times: Vec<f64>,
    /// `E |∫ b dν_t|` per time.
    pub mean_abs: Vec<Estimate>,
    /// Expected `|∫ b dν|` for a cloud of the same size drawn from the limit.
    pub floor: f64,
    /// Index range of the fitted points.
    pub window: (usize, usize),
    pub fit: Option<DecayFit>,
    pub reps: usize,
    pub verdict: Verdict,
}

/// Decay of `|∫ b(x_t) dν(x)|` averaged over realizations, fitted from the peak
/// until the curve reaches three times the finite-cloud floor.
pub fn equidistribution(
    fields: &VectorFieldSet,
    params: &PathParams,
    nu: &ParticleMeasure,
    b: &TrigMap,
    times: &[f64],
    reps: usize,
) -> Result<EquidistributionReport> {
    check_times(times)?;
    if reps < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: reps });
    }
    if b.output_dim() != 1 || b.input_dim() != nu.dim() || b.mean()[0] != 0.0 {
        return Err(FlowError::InvalidArgument("observable must be scalar with zero mean".into()));
    }
    let n = times.len();
    let runs = along_times(fields, params, nu, times, reps, |c| {
        let vals: Vec<f64> = c.particles.iter().map(|p| b.eval(&p.torus)[0]).collect();
        let (mean, var, _, _) = weighted_moments(&vals, &c.weights);
        Ok((mean.abs(), var))
    })?;
    let abs: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|v| v.0).collect()).collect();
    let mean_abs = column_estimates(&abs, n)?;
    let final_var = runs.iter().map(|r| r[n - 1].1).sum::<f64>() / reps as f64;
    let floor = (2.0 / std::f64::consts::PI).sqrt() * (final_var / nu.effective_size()).sqrt();
    let peak = mean_abs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .map_or(0, |(i, _)| i);
    let end = (peak..n).find(|&i| mean_abs[i].value <= FLOOR_MULTIPLE * floor).unwrap_or(n);
    let fit = if end >= peak + 3 {
        let y: Vec<f64> = mean_abs[peak..end].iter().map(|e| e.value).collect();
        fit_exponential(&times[peak..end], &y).ok()
    } else {
        None
    };
    let verdict = match &fit {
        Some(f) => Verdict::from_pass(f.rate_ci.0 > 0.0),
        None => Verdict::Underpowered,
    };
    Ok(EquidistributionReport {
        times: times.to_vec(),
        mean_abs,
        floor,
        window: (peak, end),
        fit,
        reps,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{circle, uniform_ball};
    use crate::trig::TrigTerm;

    #[test]
    fn zero_fields_keep_energy_constant() {
        let f = VectorFieldSet::zero(2, 1);
        let nu = ParticleMeasure::uniform_weights(uniform_ball(&[0.5, 0.5], 0.1, 50, 1).unwrap()).unwrap();
        let r = energy_trend(&f, &PathParams::new(0, 0.05), &nu, 0.1, &[1.0, 2.0, 3.0], 3).unwrap();
        assert!(r.mean.iter().all(|e| (e.value - r.initial).abs() < 1e-12));
        assert_eq!(r.bound_constant, 0.0);
    }

    #[test]
    fn rigid_translation_does_not_equidistribute() {
        let f = VectorFieldSet::constant(2, &[vec![0.2, 0.1], vec![0.0, 0.0]]).unwrap();
        let nu = ParticleMeasure::uniform_weights(circle(&[0.5, 0.5], 0.05, 64).unwrap()).unwrap();
        let b = TrigMap::new(2, 1, vec![TrigTerm::scalar(vec![0, 1], 1.0, 0.0)]).unwrap();
        let times: Vec<f64> = (0..6).map(f64::from).collect();
        let r = equidistribution(&f, &PathParams::new(0, 0.05), &nu, &b, &times, 2).unwrap();
        // |∫ b dν_t| oscillates with the translation instead of decaying
        assert!(r.verdict != Verdict::Consistent, "{r:?}");
    }
}

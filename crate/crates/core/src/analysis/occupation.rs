//! Time spent by the n-point motion near the generalized diagonal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{fit_exponential, linear_fit, DecayFit, Estimate, Verdict};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve_observed, grid_index, Integrator};
use crate::torus::distance;

/// Smallest pairwise torus distance among the `n` points stored in `z`.
pub fn min_pairwise_distance(z: &[f64], dim: usize) -> f64 {
    let n = z.len() / dim;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.min(distance(&z[i * dim..(i + 1) * dim], &z[j * dim..(j + 1) * dim]));
        }
    }
    best
}

/// Fraction of the sampled time span with distance `≤ r`, by the trapezoidal
/// rule on the indicator.
pub fn diagonal_occupation(distances: &[f64], r: f64) -> Result<f64> {
    if distances.len() < 2 {
        return Err(FlowError::InsufficientSamples {
            needed: 2,
            have: distances.len(),
        });
    }
    let inside = |d: f64| if d <= r { 1.0 } else { 0.0 };
    let total: f64 = distances.windows(2).map(|w| 0.5 * (inside(w[0]) + inside(w[1]))).sum();
    Ok(total / (distances.len() - 1) as f64)
}

/// Fraction of time an n-point trajectory (one row of concatenated points per
/// grid time) spends in the `r`-neighbourhood of the generalized diagonal.
pub fn occupation_fraction(trajectory: &[Vec<f64>], dim: usize, r: f64) -> Result<f64> {
    let d: Vec<f64> = trajectory.iter().map(|z| min_pairwise_distance(z, dim)).collect();
    diagonal_occupation(&d, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationReport {
    pub horizons: Vec<f64>,
    /// `P{fraction ≥ threshold}` per horizon.
    pub exceedance: Vec<Estimate>,
    pub mean_fraction: Vec<f64>,
    pub threshold: f64,
    pub r: f64,
    pub reps: usize,
    /// Regression slope of the exceedance probability on the horizon.
    pub trend_slope: f64,
    pub trend_ci: (f64, f64),
    /// Exponential fit of the exceedance curve, when it has enough positive points.
    pub tail: Option<DecayFit>,
    pub verdict: Verdict,
}

/// Estimates `P{occupation fraction over [0, T] ≥ threshold}` for each horizon
/// `T` from `reps` runs started at `points`, and tests for a decreasing trend.
pub fn occupation_experiment(
    fields: &VectorFieldSet,
    params: &PathParams,
    points: &[Vec<f64>],
    r: f64,
    threshold: f64,
    horizons: &[f64],
    reps: usize,
) -> Result<OccupationReport> {
    let dim = fields.dim();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if distance(&points[i], &points[j]) == 0.0 {
                return Err(FlowError::OnDiagonal(i, j));
            }
        }
    }
    if horizons.len() < 3 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FlowError::InvalidArgument("need at least 3 increasing horizons".into()));
    }
    let steps: Vec<i64> = horizons.iter().map(|&t| grid_index(t, params.dt)).collect::<Result<_>>()?;
    let t_final = *horizons.last().expect("nonempty");
    let fractions: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t_final)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme);
            let mut st = integ.initial_state(points, 0.0, params.dt, None)?;
            let inside = |d: f64| if d <= r { 1.0 } else { 0.0 };
            let mut prev = inside(min_pairwise_distance(&st.torus_coords(), dim));
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(steps.len());
            evolve_observed(&mut integ, &mut st, &path, t_final, |s| {
                let now = inside(min_pairwise_distance(&s.torus_coords(), dim));
                acc += 0.5 * (prev + now);
                prev = now;
                if steps.contains(&s.step) {
                    out.push(acc / s.step as f64);
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let m = reps as f64;
    let mut exceedance = Vec::new();
    let mut mean_fraction = Vec::new();
    for h in 0..horizons.len() {
        let p = fractions.iter().filter(|f| f[h] >= threshold).count() as f64 / m;
        exceedance.push(Estimate::with_quantile(p, (p * (1.0 - p) / m).sqrt(), 1.96));
        mean_fraction.push(fractions.iter().map(|f| f[h]).sum::<f64>() / m);
    }
    let probs: Vec<f64> = exceedance.iter().map(|e| e.value).collect();
    let trend = linear_fit(horizons, &probs)?;
    let tail = fit_exponential(horizons, &probs).ok();
    let verdict = if probs.iter().all(|&p| p == 0.0) {
        Verdict::Underpowered
    } else {
        Verdict::from_pass(trend.slope_ci.1 < 0.0)
    };
    Ok(OccupationReport {
        horizons: horizons.to_vec(),
        exceedance,
        mean_fraction,
        threshold,
        r,
        reps,
        trend_slope: trend.slope,
        trend_ci: trend.slope_ci,
        tail,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_points_under_zero_fields_never_occupy() {
        let f = VectorFieldSet::zero(2, 1);
        let pts = vec![vec![0.1, 0.1], vec![0.5, 0.5], vec![0.8, 0.2]];
        let rep = occupation_experiment(&f, &PathParams::new(0, 0.01), &pts, 0.07, 1.0 / 9.0, &[1.0, 2.0, 3.0], 4)
            .unwrap();
        assert!(rep.mean_fraction.iter().all(|&v| v == 0.0));
        assert_eq!(rep.verdict, Verdict::Underpowered);
    }

    #[test]
    fn two_points_reduce_to_diagonal_occupation() {
        let traj: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let s = 0.2 * (i as f64 * 0.05).sin().abs();
                vec![0.1, 0.3, 0.1 + s, 0.3]
            })
            .collect();
        let dists: Vec<f64> = traj.iter().map(|z| distance(&z[0..2], &z[2..4])).collect();
        assert_eq!(occupation_fraction(&traj, 2, 0.07).unwrap(), diagonal_occupation(&dists, 0.07).unwrap());
    }

    #[test]
    fn trapezoid_counts_half_intervals() {
        assert_eq!(diagonal_occupation(&[1.0, 0.0, 0.0, 1.0], 0.5).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn rejects_coincident_start() {
        let f = VectorFieldSet::zero(2, 1);
        let pts = vec![vec![0.1, 0.1], vec![0.1, 0.1]];
        assert!(matches!(
            occupation_experiment(&f, &PathParams::new(0, 0.01), &pts, 0.1, 0.25, &[1.0, 2.0, 3.0], 2),
            Err(FlowError::OnDiagonal(0, 1))
        ));
    }
}

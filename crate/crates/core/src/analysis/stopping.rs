//! Stopping times of the two-point motion relative to the diagonal, escape
//! times, exponential moments and survival-tail fits.
//!
//! With `d` the distance between the two points, `σ_j` is the first crossing
//! of `r/2` after `τ_{j−1}` and `τ_j` is the first time `t ∈ {δ, 2δ, …}` for
//! which some `s₁ ∈ [σ_j, t − δ]` has `d(s₁) = r` and `d > r/2` on `[s₁, t]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_ci, linear_fit, DecayFit, Verdict};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve_observed, grid_index, Integrator};
use crate::torus::distance;

/// Minimum sample count for a tail fit.
pub const MIN_TAIL_SAMPLES: usize = 200;
/// Survival points with fewer survivors than this are left out of the fit.
const MIN_SURVIVORS: usize = 10;
const BOOTSTRAP_REPS: usize = 200;
const BOOTSTRAP_SEED: u64 = 0x7a11;

/// Where the record stopped when the horizon ran out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "awaiting")]
pub enum OpenInterval {
    /// No `σ` after `since` (the last `τ`, or the start).
    Sigma { since: f64 },
    /// `σ` found at `sigma`, its `τ` not reached.
    Tau { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRecord {
    pub sigma_times: Vec<f64>,
    pub tau_times: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    pub open: OpenInterval,
}

impl StoppingRecord {
    /// `τ_{j+1} − τ_j`, each a return time from a point of `G_r`.
    pub fn cycles(&self) -> Vec<f64> {
        self.tau_times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Sigma { after: f64 },
    Tau { sigma: f64, candidate: Option<f64> },
}

/// Incremental construction of a [`StoppingRecord`] from distance samples on
/// the `dt` grid.
#[derive(Debug, Clone)]
pub struct StoppingTracker {
    r: f64,
    delta: f64,
    dt: f64,
    per_delta: i64,
    start: f64,
    step: i64,
    last: Option<f64>,
    phase: Phase,
    sigma_times: Vec<f64>,
    tau_times: Vec<f64>,
}

/// Linear-interpolation crossing of `level` on `[t, t + dt]`, if any.
fn crossing(a: f64, b: f64, level: f64, t: f64, dt: f64) -> Option<f64> {
    let up = a < level && b >= level;
    let down = a > level && b <= level;
    (up || down).then(|| t + (level - a) / (b - a) * dt)
}

impl StoppingTracker {
    /// Tracker whose first sample is at grid time `t0`; `dt` must divide `delta`.
    pub fn new(r: f64, delta: f64, t0: f64, dt: f64) -> Result<Self> {
        if !(r > 0.0 && delta > 0.0 && dt > 0.0) {
            return Err(FlowError::InvalidArgument("r, delta and dt must be positive".into()));
        }
        let per_delta = grid_index(delta, dt).map_err(|_| {
            FlowError::InvalidArgument(format!("dt = {dt} does not divide delta = {delta}"))
        })?;
        if per_delta < 1 {
            return Err(FlowError::InvalidArgument("delta shorter than dt".into()));
        }
        Ok(Self {
            r,
            delta,
            dt,
            per_delta,
            start: t0,
            step: grid_index(t0, dt)?,
            last: None,
            phase: Phase::Sigma {
                after: f64::NEG_INFINITY,
            },
            sigma_times: Vec::new(),
            tau_times: Vec::new(),
        })
    }

    fn time(&self, step: i64) -> f64 {
        step as f64 * self.dt
    }

    /// Feeds the distance at the next grid time.
    pub fn push(&mut self, d: f64) {
        let half = 0.5 * self.r;
        let Some(a) = self.last.replace(d) else {
            if d == half {
                let t = self.time(self.step);
                self.sigma_times.push(t);
                self.phase = Phase::Tau {
                    sigma: t,
                    candidate: None,
                };
            }
            return;
        };
        let ta = self.time(self.step);
        self.step += 1;
        let tb = self.time(self.step);
        if let Phase::Sigma { after } = self.phase {
            if let Some(c) = crossing(a, d, half, ta, self.dt).filter(|&c| c > after) {
                self.sigma_times.push(c);
                self.phase = Phase::Tau {
                    sigma: c,
                    candidate: None,
                };
            }
        }
        if let Phase::Tau { sigma, mut candidate } = self.phase {
            if candidate.is_none() {
                candidate = crossing(a, d, self.r, ta, self.dt).filter(|&c| c >= sigma);
            }
            if d <= half {
                candidate = None;
            }
            let on_delta_grid = self.step % self.per_delta == 0 && self.step > 0;
            match candidate {
                Some(s1) if on_delta_grid && tb > sigma && tb - self.delta >= s1 - 1e-9 * self.dt => {
                    self.tau_times.push(tb);
                    self.phase = Phase::Sigma { after: tb };
                }
                _ => self.phase = Phase::Tau { sigma, candidate },
            }
        }
    }

    pub fn finish(self) -> StoppingRecord {
        let open = match self.phase {
            Phase::Sigma { after } if after.is_finite() => OpenInterval::Sigma { since: after },
            Phase::Sigma { .. } => OpenInterval::Sigma { since: self.start },
            Phase::Tau { sigma, .. } => OpenInterval::Tau { sigma },
        };
        StoppingRecord {
            sigma_times: self.sigma_times,
            tau_times: self.tau_times,
            r: self.r,
            delta: self.delta,
            open,
        }
    }
}

/// Stopping record of a distance series sampled at `t0, t0 + dt, …`.
pub fn stopping_times(distances: &[f64], t0: f64, dt: f64, r: f64, delta: f64) -> Result<StoppingRecord> {
    let mut tr = StoppingTracker::new(r, delta, t0, dt)?;
    for &d in distances {
        tr.push(d);
    }
    Ok(tr.finish())
}

/// Estimate of `E e^{ατ}` with a bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub alpha: f64,
    pub value: f64,
    pub ci: (f64, f64),
    pub n: usize,
}

/// `E e^{ατ}` from duration samples; `α` must lie below the tail rate.
pub fn exp_moment(samples: &[f64], alpha: f64, tail_rate: f64) -> Result<MomentEstimate> {
    if samples.is_empty() {
        return Err(FlowError::InsufficientSamples { needed: 1, have: 0 });
    }
    if alpha >= tail_rate {
        return Err(FlowError::MomentDiverges {
            alpha,
            rate: tail_rate,
        });
    }
    let terms: Vec<f64> = samples.iter().map(|t| (alpha * t).exp()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let value = mean(&terms);
    let ci = bootstrap_ci(&terms, BOOTSTRAP_REPS, BOOTSTRAP_SEED, |s| Some(mean(s))).unwrap_or((value, value));
    Ok(MomentEstimate {
        alpha,
        value,
        ci,
        n: samples.len(),
    })
}

/// Dependence of `E e^{ατ}` for escape times on the initial separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeMomentSlope {
    pub alpha: f64,
    pub separations: Vec<f64>,
    pub moments: Vec<f64>,
    /// Slope of `log E e^{ατ}` against `log d`.
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub verdict: Verdict,
}

/// Regression of `log E e^{ατ}` on `log d`. `times[i][k]` is the escape time
/// from separation `separations[i]` and base point `k`; the bootstrap
/// resamples base points jointly across separations.
pub fn escape_moment_slope(separations: &[f64], times: &[Vec<f64>], alpha: f64) -> Result<EscapeMomentSlope> {
    if separations.len() != times.len() || separations.len() < 3 {
        return Err(FlowError::InvalidArgument("need escape samples for at least 3 separations".into()));
    }
    let n = times[0].len();
    if n < 2 || times.iter().any(|t| t.len() != n) {
        return Err(FlowError::InvalidArgument("escape samples must be paired by base point".into()));
    }
    let log_d: Vec<f64> = separations.iter().map(|d| d.ln()).collect();
    let slope_of = |idx: &[usize]| -> Option<f64> {
        let logs: Vec<f64> = times
            .iter()
            .map(|t| (idx.iter().map(|&k| (alpha * t[k]).exp()).sum::<f64>() / idx.len() as f64).ln())
            .collect();
        linear_fit(&log_d, &logs).ok().map(|f| f.slope)
    };
    let all: Vec<usize> = (0..n).collect();
    let slope = slope_of(&all).ok_or_else(|| FlowError::Degenerate("escape moments do not vary".into()))?;
    let moments = times
        .iter()
        .map(|t| t.iter().map(|v| (alpha * v).exp()).sum::<f64>() / n as f64)
        .collect();
    let slope_ci = bootstrap_ci(&all, BOOTSTRAP_REPS, BOOTSTRAP_SEED, slope_of).unwrap_or((slope, slope));
    Ok(EscapeMomentSlope {
        alpha,
        separations: separations.to_vec(),
        moments,
        slope,
        slope_ci,
        verdict: Verdict::from_pass(slope_ci.1 < 0.0),
    })
}

/// Rate and R² of the log-linear fit to the survival function above the median.
fn survival_fit(sorted: &[f64]) -> Option<(f64, f64, f64)> {
    let n = sorted.len();
    let median = sorted[n / 2];
    let mut t = Vec::new();
    let mut log_s = Vec::new();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
        let survivors = n - i;
        if v >= median && survivors >= MIN_SURVIVORS {
            t.push(v);
            log_s.push((survivors as f64 / n as f64).ln());
        }
    }
    let fit = linear_fit(&t, &log_s).ok()?;
    Some((-fit.slope, fit.intercept.exp(), fit.r2))
}

/// Fit of `P(τ > t) ≈ D e^{−γt}` above the sample median, with a bootstrap
/// interval on `γ`.
pub fn tail_fit(samples: &[f64]) -> Result<DecayFit> {
    if samples.len() < MIN_TAIL_SAMPLES {
        return Err(FlowError::InsufficientSamples {
            needed: MIN_TAIL_SAMPLES,
            have: samples.len(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(FlowError::Degenerate("zero-variance duration sample".into()));
    }
    let (rate, amplitude, r2) = survival_fit(&sorted)
        .ok_or_else(|| FlowError::Degenerate("too few distinct values above the median".into()))?;
    let points = {
        let median = sorted[sorted.len() / 2];
        let mut distinct = sorted.clone();
        distinct.dedup();
        distinct.iter().filter(|&&v| v >= median).count()
    };
    let rate_ci = bootstrap_ci(samples, BOOTSTRAP_REPS, BOOTSTRAP_SEED, |s| {
        let mut s = s.to_vec();
        s.sort_by(f64::total_cmp);
        survival_fit(&s).map(|f| f.0)
    })
    .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    Ok(DecayFit {
        amplitude,
        rate,
        separation_exponent: None,
        r2,
        rate_ci,
        points,
    })
}

/// Stopping records of `reps` independent two-point runs from `(x, y)` over `[0, t_final]`.
pub fn return_cycles(
    fields: &VectorFieldSet,
    params: &PathParams,
    x: &[f64],
    y: &[f64],
    r: f64,
    delta: f64,
    t_final: f64,
    reps: usize,
) -> Result<Vec<StoppingRecord>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t_final)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme);
            let mut st = integ.initial_state(&[x.to_vec(), y.to_vec()], 0.0, params.dt, None)?;
            let mut tr = StoppingTracker::new(r, delta, 0.0, params.dt)?;
            tr.push(distance(x, y));
            evolve_observed(&mut integ, &mut st, &path, t_final, |s| {
                tr.push(distance(&s.points[0].torus, &s.points[1].torus));
                Ok(())
            })?;
            Ok(tr.finish())
        })
        .collect()
}

/// First times the distance reaches `r` for pairs started at separation `sep`
/// along `direction` from each base point; `None` when the horizon ran out.
pub fn escape_times(
    fields: &VectorFieldSet,
    params: &PathParams,
    bases: &[Vec<f64>],
    direction: &[f64],
    sep: f64,
    r: f64,
    t_max: f64,
) -> Result<Vec<Option<f64>>> {
    bases
        .par_iter()
        .enumerate()
        .map(|(rep, x)| {
            let y: Vec<f64> = x.iter().zip(direction).map(|(a, u)| a + sep * u).collect();
            let path = params.path(fields.d(), rep as u64, 0.0, t_max)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme);
            let mut st = integ.initial_state(&[x.clone(), y.clone()], 0.0, params.dt, None)?;
            let dt = params.dt;
            let steps = grid_index(t_max, dt)?;
            let mut prev = distance(x, &y);
            let mut hit = None;
            for _ in 0..steps {
                integ.step(&mut st, &path)?;
                let d = distance(&st.points[0].torus, &st.points[1].torus);
                if d >= r {
                    hit = Some(st.time() - dt + (r - prev) / (d - prev) * dt);
                    break;
                }
                prev = d;
            }
            Ok(hit)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    /// Samples of the piecewise-linear function through `knots` at step `dt`.
    fn sampled(knots: &[(f64, f64)], dt: f64) -> Vec<f64> {
        let end = knots.last().unwrap().0;
        let steps = (end / dt).round() as usize;
        (0..=steps)
            .map(|i| {
                let t = i as f64 * dt;
                let w = knots.windows(2).find(|w| t <= w[1].0 + 1e-12).unwrap();
                let f = (t - w[0].0) / (w[1].0 - w[0].0);
                w[0].1 + f * (w[1].1 - w[0].1)
            })
            .collect()
    }

    #[test]
    fn constant_distance_gives_empty_record() {
        let rec = stopping_times(&[0.6; 500], 0.0, 0.01, 0.5, 1.0).unwrap();
        assert!(rec.sigma_times.is_empty() && rec.tau_times.is_empty());
        assert_eq!(rec.open, OpenInterval::Sigma { since: 0.0 });
    }

    #[test]
    fn hand_traced_series() {
        let d = sampled(&[(0.0, 0.6), (1.3, 0.25), (1.7, 0.3), (2.1, 0.5), (2.5, 0.6), (8.0, 0.6)], 0.1);
        let rec = stopping_times(&d, 0.0, 0.1, 0.5, 1.0).unwrap();
        assert_eq!(rec.sigma_times.len(), 1);
        assert!((rec.sigma_times[0] - 1.3).abs() < 1e-9);
        assert_eq!(rec.tau_times.len(), 1);
        assert!((rec.tau_times[0] - 4.0).abs() < 1e-9);
        assert_eq!(rec.open, OpenInterval::Sigma { since: rec.tau_times[0] });
    }

    #[test]
    fn dip_invalidates_candidate() {
        let d = sampled(
            &[(0.0, 0.6), (1.3, 0.25), (2.1, 0.5), (2.3, 0.55), (2.5, 0.2), (3.3, 0.5), (3.6, 0.6), (9.0, 0.6)],
            0.1,
        );
        let rec = stopping_times(&d, 0.0, 0.1, 0.5, 1.0).unwrap();
        assert!((rec.tau_times[0] - 5.0).abs() < 1e-9, "{:?}", rec.tau_times);
    }

    #[test]
    fn pending_pair_is_marked_open() {
        let d = sampled(&[(0.0, 0.6), (1.3, 0.25), (2.0, 0.3)], 0.1);
        let rec = stopping_times(&d, 0.0, 0.1, 0.5, 1.0).unwrap();
        assert!(rec.tau_times.is_empty());
        match rec.open {
            OpenInterval::Tau { sigma } => assert!((sigma - 1.3).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_interlace_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = 0.3f64;
        let series: Vec<f64> = (0..50_000)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                d = (d + 0.01 * z).clamp(0.0, 0.7);
                d
            })
            .collect();
        let rec = stopping_times(&series, 0.0, 0.01, 0.4, 0.1).unwrap();
        assert!(rec.tau_times.len() > 5);
        for (j, tau) in rec.tau_times.iter().enumerate() {
            assert!(rec.sigma_times[j] < *tau);
            if j + 1 < rec.sigma_times.len() {
                assert!(*tau < rec.sigma_times[j + 1]);
            }
            let m = tau / 0.1;
            assert!((m - m.round()).abs() < 1e-6);
        }
    }

    #[test]
    fn dt_must_divide_delta() {
        assert!(StoppingTracker::new(0.5, 0.1, 0.0, 0.03).is_err());
    }

    #[test]
    fn exp_moment_arithmetic() {
        let e = exp_moment(&[1.0; 10], 0.0, 1.0).unwrap();
        assert_eq!(e.value, 1.0);
        let e = exp_moment(&[1.0, 3.0], 2f64.ln(), 1.0).unwrap();
        assert!((e.value - 5.0).abs() < 1e-12);
        assert!(matches!(exp_moment(&[1.0], 0.5, 0.5), Err(FlowError::MomentDiverges { .. })));
    }

    #[test]
    fn tail_fit_recovers_exponential_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let exp = Exp::new(0.5).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| exp.sample(&mut rng)).collect();
        let fit = tail_fit(&samples).unwrap();
        assert!((0.45..=0.55).contains(&fit.rate), "{}", fit.rate);
        assert!(fit.rate_ci.0 > 0.0 && fit.r2 > 0.99);
        let scaled: Vec<f64> = samples.iter().map(|s| 4.0 * s).collect();
        let fit4 = tail_fit(&scaled).unwrap();
        assert!((fit4.rate - fit.rate / 4.0).abs() < 1e-12);
    }

    #[test]
    fn tail_fit_rejects_constant_and_small_samples() {
        assert!(matches!(tail_fit(&[2.0; 500]), Err(FlowError::Degenerate(_))));
        assert!(matches!(tail_fit(&[1.0, 2.0]), Err(FlowError::InsufficientSamples { .. })));
    }

    #[test]
    fn escape_slope_sign_follows_moments() {
        // escape times shrink with the separation: τ = −log d + noise
        let seps = [0.01, 0.02, 0.04];
        let times: Vec<Vec<f64>> =
            seps.iter().map(|d: &f64| (0..50).map(|k| -d.ln() + 0.01 * k as f64).collect()).collect();
        let s = escape_moment_slope(&seps, &times, 0.5).unwrap();
        assert!((s.slope + 0.5).abs() < 1e-9, "{s:?}");
        assert_eq!(s.verdict, Verdict::Consistent);
        assert!(escape_moment_slope(&seps[..2], &times[..2], 0.5).is_err());
    }
}

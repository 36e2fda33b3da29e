//! Small statistical toolkit: least squares with t-intervals, batch means,
//! bootstrap intervals, weighted moments and the Kolmogorov-Smirnov distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{FlowError, Result};
use crate::measures::neumaier;

/// Three-valued outcome of a statistical check, plus a flag for inputs the
/// check cannot be applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Underpowered,
    Degenerate,
}

impl Verdict {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Self::Consistent
        } else {
            Self::Inconsistent
        }
    }

    /// Worst of two verdicts; `Inconsistent` dominates.
    pub fn and(self, other: Self) -> Self {
        use Verdict::*;
        match (self, other) {
            (Inconsistent, _) | (_, Inconsistent) => Inconsistent,
            (Degenerate, _) | (_, Degenerate) => Degenerate,
            (Underpowered, _) | (_, Underpowered) => Underpowered,
            _ => Consistent,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Consistent => "consistent",
            Self::Inconsistent => "inconsistent",
            Self::Underpowered => "underpowered",
            Self::Degenerate => "degenerate",
        }
    }
}

/// A point estimate with standard error and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

impl Estimate {
    /// Symmetric interval `value ± q·se`.
    pub fn with_quantile(value: f64, se: f64, q: f64) -> Self {
        Self {
            value,
            se,
            ci: (value - q * se, value + q * se),
        }
    }

    /// Mean of independent replicates with a Student-t interval.
    pub fn from_replicates(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(FlowError::InsufficientSamples {
                needed: 2,
                have: values.len(),
            });
        }
        let (mean, var) = mean_var(values);
        let se = (var / values.len() as f64).sqrt();
        Ok(Self::with_quantile(mean, se, t_quantile(values.len() - 1)))
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci.0 > 0.0 || self.ci.1 < 0.0
    }
}

/// Two-sided 95% Student-t quantile with `df` degrees of freedom.
pub fn t_quantile(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df.max(1) as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).map(|n| n.cdf(x)).unwrap_or(f64::NAN)
}

/// Sample mean and unbiased variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = neumaier(values.iter().copied()) / n;
    let var = if values.len() > 1 {
        neumaier(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Ordinary least squares `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_se: f64,
    /// 95% Student-t interval on the slope.
    pub slope_ci: (f64, f64),
    pub n: usize,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(FlowError::InvalidArgument("x/y length mismatch".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(FlowError::InsufficientSamples { needed: 3, have: n });
    }
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxx = neumaier(x.iter().map(|v| (v - mx) * (v - mx)));
    if sxx == 0.0 {
        return Err(FlowError::Degenerate("regressor has zero variance".into()));
    }
    let sxy = neumaier(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = neumaier(x.iter().zip(y).map(|(a, b)| {
        let e = b - intercept - slope * a;
        e * e
    }));
    let syy = neumaier(y.iter().map(|v| (v - my) * (v - my)));
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = (sse / (n - 2) as f64 / sxx).sqrt();
    let q = t_quantile(n - 2);
    Ok(LinearFit {
        slope,
        intercept,
        r2,
        slope_se,
        slope_ci: (slope - q * slope_se, slope + q * slope_se),
        n,
    })
}

/// Fitted `C e^{−θt}`, optionally with a separation exponent `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    pub rate: f64,
    pub separation_exponent: Option<f64>,
    pub r2: f64,
    /// 95% interval on the rate.
    pub rate_ci: (f64, f64),
    pub points: usize,
}

impl DecayFit {
    /// Rate positive at 95% and fit quality at least `min_r2`.
    pub fn decays(&self, min_r2: f64) -> bool {
        self.rate_ci.0 > 0.0 && self.r2 >= min_r2
    }
}

/// Log-linear fit of `y ≈ C e^{−θt}` on the strictly positive ordinates.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<DecayFit> {
    let (tt, ly): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(a, v)| (*a, v.ln()))
        .unzip();
    let fit = linear_fit(&tt, &ly)?;
    Ok(DecayFit {
        amplitude: fit.intercept.exp(),
        rate: -fit.slope,
        separation_exponent: None,
        r2: fit.r2,
        rate_ci: (-fit.slope_ci.1, -fit.slope_ci.0),
        points: fit.n,
    })
}

/// Batch-means estimate for a time average: `batches` are per-segment averages.
pub fn batch_means(batches: &[f64]) -> Result<Estimate> {
    Estimate::from_replicates(batches)
}

/// Percentile bootstrap interval for `stat` at level 95%.
pub fn bootstrap_ci<T: Clone>(
    data: &[T],
    reps: usize,
    seed: u64,
    mut stat: impl FnMut(&[T]) -> Option<f64>,
) -> Option<(f64, f64)> {
    if data.is_empty() || reps < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(data.len());
    let mut values = Vec::with_capacity(reps);
    for _ in 0..reps {
        buf.clear();
        buf.extend((0..data.len()).map(|_| data[rng.gen_range(0..data.len())].clone()));
        if let Some(v) = stat(&buf) {
            if v.is_finite() {
                values.push(v);
            }
        }
    }
    if values.len() < reps / 2 {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some((quantile_sorted(&values, 0.025), quantile_sorted(&values, 0.975)))
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Weighted central moments `(mean, m2, m3, m4)` with weights normalized to 1.
pub fn weighted_moments(values: &[f64], weights: &[f64]) -> (f64, f64, f64, f64) {
    let total = neumaier(weights.iter().copied());
    let mean = neumaier(values.iter().zip(weights).map(|(v, w)| v * w)) / total;
    let m = |k: i32| neumaier(values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(k))) / total;
    (mean, m(2), m(3), m(4))
}

/// Kolmogorov-Smirnov distance between the weighted empirical law and `N(mean, sd²)`.
pub fn ks_normal(values: &[f64], weights: &[f64], mean: f64, sd: f64) -> f64 {
    let total = neumaier(weights.iter().copied());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let normal = Normal::new(mean, sd).expect("positive sd");
    let mut below = 0.0;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < order.len() {
        // tied values form one jump of the empirical distribution
        let v = values[order[i]];
        let mut jump = 0.0;
        while i < order.len() && values[order[i]] == v {
            jump += weights[order[i]];
            i += 1;
        }
        let f = normal.cdf(v);
        d = d.max((below / total - f).abs());
        below += jump;
        d = d.max((below / total - f).abs());
    }
    d.min(1.0)
}

/// Welch's test that several means with separately estimated standard errors
/// are equal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub statistic: f64,
    pub df1: f64,
    pub df2: f64,
    /// 95% quantile of `F(df1, df2)`.
    pub critical: f64,
}

impl WelchTest {
    pub fn passes(&self) -> bool {
        self.statistic <= self.critical
    }
}

/// Welch's heteroscedastic one-way ANOVA on estimates whose squared standard
/// errors each carry `dof` degrees of freedom.
pub fn welch_anova(estimates: &[Estimate], dof: usize) -> Result<WelchTest> {
    let k = estimates.len();
    if k < 2 || dof == 0 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: k });
    }
    if estimates.iter().any(|e| !(e.se > 0.0 && e.se.is_finite())) {
        return Err(FlowError::Degenerate("welch test needs positive finite standard errors".into()));
    }
    let w: Vec<f64> = estimates.iter().map(|e| 1.0 / (e.se * e.se)).collect();
    let total: f64 = w.iter().sum();
    let pooled = estimates.iter().zip(&w).map(|(e, w)| w * e.value).sum::<f64>() / total;
    let kf = k as f64;
    let between = estimates.iter().zip(&w).map(|(e, w)| w * (e.value - pooled).powi(2)).sum::<f64>() / (kf - 1.0);
    let lambda = w.iter().map(|w| (1.0 - w / total).powi(2)).sum::<f64>() / dof as f64;
    let statistic = between / (1.0 + 2.0 * (kf - 2.0) * lambda / (kf * kf - 1.0));
    let df1 = kf - 1.0;
    let df2 = (kf * kf - 1.0) / (3.0 * lambda);
    let critical = FisherSnedecor::new(df1, df2).map_or(f64::INFINITY, |f| f.inverse_cdf(0.95));
    Ok(WelchTest {
        statistic,
        df1,
        df2,
        critical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_rejects_constant_regressor() {
        assert!(matches!(linear_fit(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(FlowError::Degenerate(_))));
    }

    #[test]
    fn exponential_fit_skips_nonpositive_points() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let mut y: Vec<f64> = t.iter().map(|v| 3.0 * (-0.7 * v).exp()).collect();
        y[4] = -1.0;
        y[7] = 0.0;
        let f = fit_exponential(&t, &y).unwrap();
        assert_eq!(f.points, 18);
        assert!((f.rate - 0.7).abs() < 1e-12);
        assert!((f.amplitude - 3.0).abs() < 1e-12);
    }

    #[test]
    fn t_quantile_matches_tables() {
        assert!((t_quantile(10) - 2.228).abs() < 1e-3);
        assert!((t_quantile(1000) - 1.962).abs() < 1e-3);
    }

    #[test]
    fn ks_of_gaussian_draws_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = vec![1.0; v.len()];
        let d = ks_normal(&v, &w, 0.0, 1.0);
        assert!(d < 1.63 / (v.len() as f64).sqrt(), "{d}");
    }

    #[test]
    fn ks_handles_ties_as_single_jump() {
        let v = [0.0, 0.0];
        let d = ks_normal(&v, &[1.0, 1.0], 0.0, 1.0);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let data: Vec<f64> = (0..50).map(f64::from).collect();
        let mean = |s: &[f64]| Some(s.iter().sum::<f64>() / s.len() as f64);
        let a = bootstrap_ci(&data, 200, 9, mean).unwrap();
        let b = bootstrap_ci(&data, 200, 9, mean).unwrap();
        assert_eq!(a, b);
        assert!(a.0 < 24.5 && a.1 > 24.5);
    }

    #[test]
    fn verdict_combination() {
        use Verdict::*;
        assert_eq!(Consistent.and(Underpowered), Underpowered);
        assert_eq!(Underpowered.and(Inconsistent), Inconsistent);
        assert_eq!(Consistent.and(Consistent), Consistent);
    }

    #[test]
    fn welch_matches_reference_value() {
        // three groups: means 10, 12, 15 with variances 4, 9, 16 over 10 samples each
        let est: Vec<Estimate> = [(10.0, 4.0), (12.0, 9.0), (15.0, 16.0)]
            .iter()
            .map(|&(m, v): &(f64, f64)| Estimate::with_quantile(m, (v / 10.0).sqrt(), 1.96))
            .collect();
        let w = welch_anova(&est, 9).unwrap();
        let lambda = {
            let ws = [2.5, 10.0 / 9.0, 0.625];
            let t: f64 = ws.iter().sum();
            ws.iter().map(|x| (1.0 - x / t).powi(2)).sum::<f64>() / 9.0
        };
        assert!((w.df2 - 8.0 / (3.0 * lambda)).abs() < 1e-9);
        assert!(w.statistic > w.critical);
        let same: Vec<Estimate> = est.iter().map(|e| Estimate { value: 1.0, ..*e }).collect();
        assert_eq!(welch_anova(&same, 9).unwrap().statistic, 0.0);
    }
}

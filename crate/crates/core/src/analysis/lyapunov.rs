//! Lyapunov exponents from QR-renormalized tangent frames, and the
//! Carverhill time average of `R` on the unit tangent bundle.

use serde::{Deserialize, Serialize};

use super::stats::{batch_means, Estimate, Verdict};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::{PointEval, VectorFieldSet};
use crate::flow::{evolve_observed, Integrator, MultiPointState};

/// Finite-difference step along the lifted fields on the unit tangent bundle.
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Sorted in decreasing order.
    pub exponents: Vec<Estimate>,
    pub sum: Estimate,
    /// `(1/T) log |det Dx_T|`, the sum recomputed from the determinant.
    pub log_det_rate: f64,
    pub t: f64,
    pub segments: usize,
}

impl LyapunovSpectrum {
    /// `|Σλ| ≤ k` standard errors of the sum.
    pub fn sum_within(&self, k: f64) -> bool {
        self.sum.value.abs() <= k * self.sum.se
    }
}

/// Runs one frame trajectory and returns per-segment log growth of each column.
fn frame_run(
    fields: &VectorFieldSet,
    params: &PathParams,
    x0: &[f64],
    frame: Option<Vec<f64>>,
    columns: usize,
    t_final: f64,
    segments: usize,
    mut per_step: impl FnMut(&MultiPointState) -> Result<()>,
) -> Result<(Vec<Vec<f64>>, MultiPointState)> {
    if segments < 2 {
        return Err(FlowError::InvalidArgument("need at least 2 segments".into()));
    }
    if !(t_final > 0.0) {
        return Err(FlowError::InvalidArgument(format!("horizon {t_final} must be positive")));
    }
    let dt = params.dt;
    let total = (t_final / dt).round() as i64;
    if total < segments as i64 {
        return Err(FlowError::InvalidArgument("fewer steps than segments".into()));
    }
    let path = params.path(fields.d(), 0, 0.0, t_final)?;
    let mut integ = Integrator::new(fields.clone(), params.scheme);
    let mut state = integ.initial_state(&[x0.to_vec()], 0.0, dt, Some(columns))?;
    if let (Some(m), Some(f)) = (frame, state.frames.as_mut()) {
        f.matrices[0] = m;
    }
    let mut previous = vec![0.0; columns];
    let mut growth = Vec::with_capacity(segments);
    for s in 1..=segments {
        let end = (total * s as i64) / segments as i64;
        evolve_observed(&mut integ, &mut state, &path, end as f64 * dt, &mut per_step)?;
        let now = state.frames.as_ref().expect("frames requested").log_growth(0);
        let seg_t = state.time() - (total * (s as i64 - 1) / segments as i64) as f64 * dt;
        growth.push(now.iter().zip(&previous).map(|(a, b)| (a - b) / seg_t).collect());
        previous = now;
    }
    Ok((growth, state))
}

/// Top exponent `λ₁` from the growth of `Dx_t v₀`, with a batch-means interval.
pub fn lyapunov_top(
    fields: &VectorFieldSet,
    params: &PathParams,
    x0: &[f64],
    v0: &[f64],
    t_final: f64,
    segments: usize,
) -> Result<Estimate> {
    check_unit(v0, fields.dim())?;
    let (growth, _) = frame_run(fields, params, x0, Some(v0.to_vec()), 1, t_final, segments, |_| Ok(()))?;
    batch_means(&growth.iter().map(|g| g[0]).collect::<Vec<_>>())
}

fn check_unit(v: &[f64], n: usize) -> Result<()> {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if v.len() != n || (norm - 1.0).abs() > 1e-9 {
        return Err(FlowError::InvalidArgument("initial tangent vector must be a unit vector in R^N".into()));
    }
    Ok(())
}

/// Full spectrum by the QR method.
pub fn lyapunov_spectrum(
    fields: &VectorFieldSet,
    params: &PathParams,
    x0: &[f64],
    t_final: f64,
    segments: usize,
) -> Result<LyapunovSpectrum> {
    let n = fields.dim();
    let (growth, state) = frame_run(fields, params, x0, None, n, t_final, segments, |_| Ok(()))?;
    let mut exponents = (0..n)
        .map(|i| batch_means(&growth.iter().map(|g| g[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    exponents.sort_by(|a, b| b.value.total_cmp(&a.value));
    let sums: Vec<f64> = growth.iter().map(|g| g.iter().sum()).collect();
    let frames = state.frames.as_ref().expect("frames requested");
    Ok(LyapunovSpectrum {
        exponents,
        sum: batch_means(&sums)?,
        log_det_rate: frames.log_det(0)? / state.time(),
        t: state.time(),
        segments,
    })
}

fn mat_vec(j: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = (0..n).map(|c| j[i * n + c] * v[c]).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g_k(v) = ⟨DX_k v, v⟩` for unit `v`.
fn g(eval: &PointEval, k: usize, v: &[f64], tmp: &mut [f64]) -> f64 {
    let n = v.len();
    mat_vec(eval.jacobian(k, n), v, tmp);
    dot(tmp, v)
}

/// `R(x, v) = g₀ + ½ Σ_k L_{X̃_k} g_k` at a unit tangent vector `v`, with the
/// Lie derivatives taken by central differences along the lifted fields
/// `X̃_k = (X_k, DX_k v − g_k v)`.
pub fn carverhill_rate(fields: &VectorFieldSet, x: &[f64], v: &[f64]) -> f64 {
    let n = fields.dim();
    let mut eval = PointEval::default();
    let mut shifted = PointEval::default();
    fields.evaluate_all(x, &mut eval);
    let mut tmp = vec![0.0; n];
    let mut r = g(&eval, 0, v, &mut tmp);
    let mut w = vec![0.0; n];
    let mut xs = vec![0.0; n];
    let mut vs = vec![0.0; n];
    for k in 1..=fields.d() {
        let gk = g(&eval, k, v, &mut tmp);
        for i in 0..n {
            w[i] = tmp[i] - gk * v[i];
        }
        let xk = eval.value(k, n);
        let mut side = |sign: f64| {
            for i in 0..n {
                xs[i] = x[i] + sign * FD_STEP * xk[i];
                vs[i] = v[i] + sign * FD_STEP * w[i];
            }
            let norm = dot(&vs, &vs).sqrt();
            vs.iter_mut().for_each(|c| *c /= norm);
            fields.evaluate_all(&xs, &mut shifted);
            g(&shifted, k, &vs, &mut tmp)
        };
        let plus = side(1.0);
        let minus = side(-1.0);
        r += 0.5 * (plus - minus) / (2.0 * FD_STEP);
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarverhillCheck {
    pub lognorm: Estimate,
    pub carverhill: Estimate,
    /// Half-width `1.96 √(se₁² + se₂²)` of the joint interval.
    pub joint_half_width: f64,
    pub verdict: Verdict,
}

/// Compares `λ₁` from the log-norm growth with the time average of `R` along
/// the same trajectory of the projectivized tangent flow.
pub fn carverhill_check(
    fields: &VectorFieldSet,
    params: &PathParams,
    x0: &[f64],
    v0: &[f64],
    t_final: f64,
    segments: usize,
) -> Result<CarverhillCheck> {
    check_unit(v0, fields.dim())?;
    let total = (t_final / params.dt).round() as i64;
    let mut r_sums = vec![0.0; segments];
    let mut r_counts = vec![0usize; segments];
    let mut v = vec![0.0; fields.dim()];
    let (growth, _) = frame_run(fields, params, x0, Some(v0.to_vec()), 1, t_final, segments, |st| {
        let m = &st.frames.as_ref().expect("frames requested").matrices[0];
        let norm = dot(m, m).sqrt();
        v.iter_mut().zip(m).for_each(|(a, b)| *a = b / norm);
        // step `st.step` closes the interval [step−1, step]; attribute it to its segment
        let seg = (((st.step - 1) * segments as i64) / total) as usize;
        let seg = seg.min(segments - 1);
        r_sums[seg] += carverhill_rate(fields, &st.points[0].torus, &v);
        r_counts[seg] += 1;
        Ok(())
    })?;
    let lognorm = batch_means(&growth.iter().map(|g| g[0]).collect::<Vec<_>>())?;
    let batches: Vec<f64> = r_sums.iter().zip(&r_counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let carverhill = batch_means(&batches)?;
    let joint_half_width = 1.96 * (lognorm.se.powi(2) + carverhill.se.powi(2)).sqrt();
    let verdict = Verdict::from_pass((lognorm.value - carverhill.value).abs() <= joint_half_width);
    Ok(CarverhillCheck {
        lognorm,
        carverhill,
        joint_half_width,
        verdict,
    })
}

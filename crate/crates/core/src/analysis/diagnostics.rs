//! Integrator diagnostics: strong self-convergence on refined paths and the
//! volume defect of divergence-free flows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{linear_fit, Estimate, Verdict};
use super::PathParams;
use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve, grid_index, Integrator, Scheme};
use crate::noise::NoisePath;

pub const MIN_ORDER: f64 = 0.45;
pub const MIN_ORDER_R2: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scheme: Scheme,
    pub t: f64,
    pub reps: usize,
    /// Coarse steps `h`; each error compares step `h` with step `h/2`.
    pub dts: Vec<f64>,
    /// Mean `|x^h_T − x^{h/2}_T|` over realizations.
    pub errors: Vec<Estimate>,
    pub order: f64,
    pub order_ci: (f64, f64),
    pub r2: f64,
    pub verdict: Verdict,
}

/// Strong self-convergence of one trajectory from `x0`: the step-`h` path is
/// the bridge refinement of the step-`2h` path, so all step sizes see one
/// Brownian motion. `dts` must halve from one entry to the next.
pub fn self_convergence(
    fields: &VectorFieldSet,
    seed: u64,
    scheme: Scheme,
    x0: &[f64],
    dts: &[f64],
    t: f64,
    reps: usize,
) -> Result<ConvergenceReport> {
    if dts.len() < 3 || dts.windows(2).any(|w| (w[1] - 0.5 * w[0]).abs() > 1e-12 * w[0]) {
        return Err(FlowError::InvalidArgument("need at least 3 step sizes, each half the previous".into()));
    }
    if reps < 2 {
        return Err(FlowError::InsufficientSamples { needed: 2, have: reps });
    }
    let steps = grid_index(t, dts[0])?;
    let runs: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut path = NoisePath::new(seed, rep, fields.d(), dts[0], 0, steps)?;
            let mut finals = Vec::with_capacity(dts.len() + 1);
            for level in 0..=dts.len() {
                if level > 0 {
                    path = path.refine()?;
                }
                let mut integ = Integrator::new(fields.clone(), scheme).with_qr_every(None);
                let mut st = integ.initial_state(&[x0.to_vec()], 0.0, path.dt(), None)?;
                evolve(&mut integ, &mut st, &path, t)?;
                finals.push(st.points[0].lift.clone());
            }
            Ok(finals
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect())
        })
        .collect::<Result<_>>()?;
    let errors: Vec<Estimate> = (0..dts.len())
        .map(|i| Estimate::from_replicates(&runs.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    if errors.iter().any(|e| !(e.value > 0.0)) {
        return Err(FlowError::Degenerate("zero self-convergence error".into()));
    }
    let log_h: Vec<f64> = dts.iter().map(|h| h.ln()).collect();
    let log_e: Vec<f64> = errors.iter().map(|e| e.value.ln()).collect();
    let fit = linear_fit(&log_h, &log_e)?;
    Ok(ConvergenceReport {
        scheme,
        t,
        reps,
        dts: dts.to_vec(),
        errors,
        order: fit.slope,
        order_ci: fit.slope_ci,
        r2: fit.r2,
        verdict: Verdict::from_pass(fit.slope >= MIN_ORDER && fit.r2 >= MIN_ORDER_R2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub t: f64,
    pub reps: usize,
    /// `|det Dx_t − 1|` per realization.
    pub defects: Vec<f64>,
    pub max_defect: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

/// Jacobian determinant of the flow map at `x0` after time `t`, compared with 1.
pub fn volume_defect(
    fields: &VectorFieldSet,
    params: &PathParams,
    x0: &[f64],
    t: f64,
    reps: usize,
    tolerance: f64,
) -> Result<VolumeReport> {
    if !fields.divergence_free() {
        return Err(FlowError::InvalidArgument("volume check needs a divergence-free field set".into()));
    }
    let n = fields.dim();
    let defects: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let path = params.path(fields.d(), rep, 0.0, t)?;
            let mut integ = Integrator::new(fields.clone(), params.scheme);
            let mut st = integ.initial_state(&[x0.to_vec()], 0.0, params.dt, Some(n))?;
            evolve(&mut integ, &mut st, &path, t)?;
            let frames = st.frames.as_ref().expect("frames requested");
            let det = frames.det_sign(0) * frames.log_det(0)?.exp();
            Ok((det - 1.0).abs())
        })
        .collect::<Result<_>>()?;
    let max_defect = defects.iter().copied().fold(0.0, f64::max);
    Ok(VolumeReport {
        t,
        reps,
        defects,
        max_defect,
        tolerance,
        verdict: Verdict::from_pass(max_defect <= tolerance),
    })
}

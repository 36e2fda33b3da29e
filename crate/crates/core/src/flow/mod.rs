//! Integration of the n-point motion, its tangent flow and additive functionals.
//!
//! All points of a [`MultiPointState`] are driven by the same [`NoisePath`].
//! Points are advanced with either a Stratonovich Heun predictor-corrector or
//! an Itô-Euler step with the drift `X_0 + ½ Σ_k DX_k X_k`. Functionals are
//! always accumulated in Itô form.

mod functional;

pub use functional::{center_functional, Centering, CenteringMeasure, FunctionalSpec};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{FlowError, Result};
use crate::fields::{PointEval, VectorFieldSet};
use crate::noise::NoisePath;
use crate::torus::{wrap, LiftedPoint};
use crate::trig::PhaseTable;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_QR_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Heun,
    ItoEuler,
}

/// Tangent frames `Dx_t·E` for every point, `E` the first `columns` unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub columns: usize,
    /// Row-major `N × columns` matrix per point.
    pub matrices: Vec<Vec<f64>>,
    /// Accumulated `log r_ii` from QR renormalizations, per point.
    pub log_r: Vec<Vec<f64>>,
    pub renormalizations: u64,
}

impl FrameSet {
    fn identity(points: usize, dim: usize, columns: usize) -> Self {
        let mut m = vec![0.0; dim * columns];
        for i in 0..columns {
            m[i * columns + i] = 1.0;
        }
        Self {
            columns,
            matrices: vec![m; points],
            log_r: vec![vec![0.0; columns]; points],
            renormalizations: 0,
        }
    }

    fn dim(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.len() / self.columns.max(1))
    }

    /// QR-renormalizes every frame, adding `log r_ii` to the accumulators.
    pub fn renormalize(&mut self) {
        let n = self.dim();
        for (m, acc) in self.matrices.iter_mut().zip(self.log_r.iter_mut()) {
            let (q, diag) = positive_qr(n, self.columns, m);
            *m = q;
            for (a, r) in acc.iter_mut().zip(diag) {
                *a += r.ln();
            }
        }
        self.renormalizations += 1;
    }

    /// Total `log r_ii` growth of point `p` including the current, unnormalized frame.
    pub fn log_growth(&self, p: usize) -> Vec<f64> {
        let (_, diag) = positive_qr(self.dim(), self.columns, &self.matrices[p]);
        self.log_r[p].iter().zip(diag).map(|(a, r)| a + r.ln()).collect()
    }

    /// `log |det Dx_t|` at point `p`; requires full frames.
    pub fn log_det(&self, p: usize) -> Result<f64> {
        let n = self.dim();
        if self.columns != n {
            return Err(FlowError::InvalidArgument("log_det needs N columns".into()));
        }
        let m = DMatrix::from_row_slice(n, n, &self.matrices[p]);
        Ok(self.log_r[p].iter().sum::<f64>() + m.determinant().abs().ln())
    }

    /// Sign of `det Dx_t` at point `p`.
    pub fn det_sign(&self, p: usize) -> f64 {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.matrices[p]).determinant().signum()
    }
}

/// QR of a row-major `n × c` matrix with a positive diagonal on `R`.
fn positive_qr(n: usize, c: usize, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let qr = DMatrix::from_row_slice(n, c, m).qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut diag = Vec::with_capacity(c);
    for i in 0..c {
        let rii = r[(i, i)];
        if rii < 0.0 {
            q.column_mut(i).neg_mut();
        }
        diag.push(rii.abs());
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            out[i * c + j] = q[(i, j)];
        }
    }
    (out, diag)
}

/// State of the n-point motion at grid time `step · dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPointState {
    pub step: i64,
    pub dt: f64,
    pub points: Vec<LiftedPoint>,
    pub frames: Option<FrameSet>,
    pub functionals: Vec<Accumulator>,
}

/// Values of one functional. Arity-1 functionals hold one block of `q` values
/// per point; joint functionals hold a single block.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub width: usize,
    pub values: Vec<f64>,
}

impl Accumulator {
    pub fn blocks(&self) -> usize {
        self.values.len() / self.width.max(1)
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.values[b * self.width..(b + 1) * self.width]
    }
}

impl MultiPointState {
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, LiftedPoint::dim)
    }

    /// Torus coordinates of all points, concatenated.
    pub fn torus_coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.torus.iter().copied()).collect()
    }
}

/// Resolves `t` to a grid index for step `dt`.
pub fn grid_index(t: f64, dt: f64) -> Result<i64> {
    let k = (t / dt).round();
    if !k.is_finite() || (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(FlowError::OffGrid(t));
    }
    Ok(k as i64)
}

/// Stepper for a field set, a scheme and a list of functionals.
///
/// Holds scratch buffers; clone one per worker thread.
#[derive(Debug, Clone)]
pub struct Integrator {
    fields: VectorFieldSet,
    scheme: Scheme,
    functionals: Vec<FunctionalSpec>,
    qr_every: Option<usize>,
    scratch: Scratch,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    eval: Vec<PointEval>,
    pred: PointEval,
    dtheta: Vec<f64>,
    incr: Vec<f64>,
    incr_pred: Vec<f64>,
    lift_pred: Vec<f64>,
    torus_pred: Vec<f64>,
    mat: Vec<f64>,
    mat_pred: Vec<f64>,
    frame_pred: Vec<f64>,
    tmp: Vec<f64>,
    hess: Vec<f64>,
    z: Vec<f64>,
    lifted: Vec<f64>,
    jac: Vec<f64>,
    fval: Vec<f64>,
    lie: Vec<f64>,
}

impl Integrator {
    pub fn new(fields: VectorFieldSet, scheme: Scheme) -> Self {
        Self {
            fields,
            scheme,
            functionals: Vec::new(),
            qr_every: Some(DEFAULT_QR_EVERY),
            scratch: Scratch::default(),
        }
    }

    pub fn with_functionals(mut self, functionals: Vec<FunctionalSpec>) -> Result<Self> {
        for f in &functionals {
            f.check_against(&self.fields)?;
        }
        self.functionals = functionals;
        Ok(self)
    }

    /// QR renormalization period used by [`evolve`]; `None` disables it.
    pub fn with_qr_every(mut self, qr_every: Option<usize>) -> Self {
        self.qr_every = qr_every.filter(|&k| k > 0);
        self
    }

    pub fn fields(&self) -> &VectorFieldSet {
        &self.fields
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn functionals(&self) -> &[FunctionalSpec] {
        &self.functionals
    }

    /// Initial state at grid time `t0` with optional `frame_columns` tangent columns.
    pub fn initial_state(
        &self,
        points: &[Vec<f64>],
        t0: f64,
        dt: f64,
        frame_columns: Option<usize>,
    ) -> Result<MultiPointState> {
        let n = self.fields.dim();
        if points.is_empty() {
            return Err(FlowError::InvalidArgument("no initial points".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != n) {
            return Err(FlowError::InvalidArgument(format!(
                "point of dimension {} for N = {n}",
                p.len()
            )));
        }
        let frames = match frame_columns {
            Some(c) if c == 0 || c > n => {
                return Err(FlowError::InvalidArgument(format!("frame columns {c} not in 1..={n}")))
            }
            Some(c) => Some(FrameSet::identity(points.len(), n, c)),
            None => None,
        };
        let mut functionals = Vec::with_capacity(self.functionals.len());
        for f in &self.functionals {
            let blocks = accumulator_blocks(f, points.len())?;
            functionals.push(Accumulator {
                width: f.output_dim(),
                values: vec![0.0; blocks * f.output_dim()],
            });
        }
        Ok(MultiPointState {
            step: grid_index(t0, dt)?,
            dt,
            points: points.iter().map(|p| LiftedPoint::at(p)).collect(),
            frames,
            functionals,
        })
    }

    /// Advances `state` by one step of `path`.
    pub fn step(&mut self, state: &mut MultiPointState, path: &NoisePath) -> Result<()> {
        if (state.dt - path.dt()).abs() > 1e-15 * path.dt() {
            return Err(FlowError::InvalidArgument(format!(
                "state dt {} does not match path dt {}",
                state.dt,
                path.dt()
            )));
        }
        let n = self.fields.dim();
        let d = self.fields.d();
        let dt = state.dt;
        let s = &mut self.scratch;
        s.dtheta.resize(d, 0.0);
        path.increment_into(state.step, &mut s.dtheta)?;
        let npts = state.points.len();
        if s.eval.len() < npts {
            s.eval.resize_with(npts, PointEval::default);
        }
        for (p, pt) in state.points.iter().enumerate() {
            self.fields.evaluate_all(&pt.torus, &mut s.eval[p]);
        }

        // functionals read the pre-step state
        let eval = std::mem::take(&mut s.eval);
        let dtheta = std::mem::take(&mut s.dtheta);
        for (fi, spec) in self.functionals.iter().enumerate() {
            accumulate_functional(spec, &self.fields, state, &eval, &dtheta, dt, fi, s);
        }
        s.eval = eval;
        s.dtheta = dtheta;

        let cols = state.frames.as_ref().map_or(0, |f| f.columns);
        for p in 0..npts {
            let ev = &s.eval[p];
            s.incr.clear();
            s.incr.resize(n, 0.0);
            combine_values(ev, n, d, &s.dtheta, dt, &mut s.incr);
            if cols > 0 {
                s.mat.resize(n * n, 0.0);
                combine_jacobians(ev, n, d, &s.dtheta, dt, &mut s.mat);
            }
            match self.scheme {
                Scheme::ItoEuler => {
                    // ½ Σ DX_k X_k dt
                    for k in 1..=d {
                        let j = ev.jacobian(k, n);
                        let v = ev.value(k, n);
                        for i in 0..n {
                            let row = &j[i * n..(i + 1) * n];
                            s.incr[i] += 0.5 * dt * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    let pt = &mut state.points[p];
                    for (l, inc) in pt.lift.iter_mut().zip(&s.incr) {
                        *l += inc;
                    }
                    pt.rewrap();
                    if let Some(frames) = state.frames.as_mut() {
                        // ½ Σ (H_k[X_k] + DX_k²) dt
                        s.hess.resize(n * n, 0.0);
                        s.tmp.resize(n * n, 0.0);
                        for k in 1..=d {
                            let field = &self.fields.fields()[k];
                            field.jacobian_derivative_with(&ev.table, ev.value(k, n), &mut s.hess);
                            let j = ev.jacobian(k, n);
                            matmul(j, j, n, n, n, &mut s.tmp);
                            for ((m, h), t) in s.mat.iter_mut().zip(&s.hess).zip(&s.tmp) {
                                *m += 0.5 * dt * (h + t);
                            }
                        }
                        let f = &mut frames.matrices[p];
                        s.frame_pred.resize(n * cols, 0.0);
                        matmul(&s.mat, f, n, n, cols, &mut s.frame_pred);
                        for (x, y) in f.iter_mut().zip(&s.frame_pred) {
                            *x += y;
                        }
                    }
                }
                Scheme::Heun => {
                    let pt = &state.points[p];
                    s.lift_pred.clear();
                    s.lift_pred.extend(pt.lift.iter().zip(&s.incr).map(|(l, i)| l + i));
                    s.torus_pred.clear();
                    s.torus_pred.extend(s.lift_pred.iter().map(|&v| wrap(v)));
                    self.fields.evaluate_all(&s.torus_pred, &mut s.pred);
                    s.incr_pred.clear();
                    s.incr_pred.resize(n, 0.0);
                    combine_values(&s.pred, n, d, &s.dtheta, dt, &mut s.incr_pred);
                    let pt = &mut state.points[p];
                    for ((l, a), b) in pt.lift.iter_mut().zip(&s.incr).zip(&s.incr_pred) {
                        *l += 0.5 * (a + b);
                    }
                    pt.rewrap();
                    if let Some(frames) = state.frames.as_mut() {
                        s.mat_pred.resize(n * n, 0.0);
                        combine_jacobians(&s.pred, n, d, &s.dtheta, dt, &mut s.mat_pred);
                        let f = &mut frames.matrices[p];
                        // M(x)F, then F* = F + M(x)F, then M(x*)F*
                        s.frame_pred.resize(n * cols, 0.0);
                        matmul(&s.mat, f, n, n, cols, &mut s.frame_pred);
                        s.tmp.resize(n * cols, 0.0);
                        for ((t, x), y) in s.tmp.iter_mut().zip(f.iter()).zip(&s.frame_pred) {
                            *t = x + y;
                        }
                        s.hess.resize(n * cols, 0.0);
                        matmul(&s.mat_pred, &s.tmp, n, n, cols, &mut s.hess);
                        for ((x, a), b) in f.iter_mut().zip(&s.frame_pred).zip(&s.hess) {
                            *x += 0.5 * (a + b);
                        }
                    }
                }
            }
        }
        state.step += 1;
        check_finite(state)
    }
}

fn accumulator_blocks(spec: &FunctionalSpec, points: usize) -> Result<usize> {
    if spec.arity == points {
        Ok(1)
    } else if spec.arity == 1 {
        Ok(points)
    } else {
        Err(FlowError::InvalidArgument(format!(
            "functional of arity {} cannot read {points} points",
            spec.arity
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_functional(
    spec: &FunctionalSpec,
    fields: &VectorFieldSet,
    state: &mut MultiPointState,
    eval: &[PointEval],
    dtheta: &[f64],
    dt: f64,
    fi: usize,
    s: &mut Scratch,
) {
    let n = fields.dim();
    let d = fields.d();
    let q = spec.output_dim();
    let npts = state.points.len();
    let blocks = if spec.arity == npts { 1 } else { npts };
    let input = spec.arity * n;
    s.z.resize(input, 0.0);
    s.lifted.resize(d * input, 0.0);
    s.jac.resize(q * input, 0.0);
    s.fval.resize(q, 0.0);
    s.lie.resize(q, 0.0);
    let bw = spec.bandwidth();
    let mut table = PhaseTable::default();
    for b in 0..blocks {
        let members: Vec<usize> = if blocks == 1 { (0..npts).collect() } else { vec![b] };
        for (slot, &p) in members.iter().enumerate() {
            s.z[slot * n..(slot + 1) * n].copy_from_slice(&state.points[p].torus);
            for k in 0..d {
                s.lifted[k * input + slot * n..k * input + (slot + 1) * n]
                    .copy_from_slice(eval[p].value(k + 1, n));
            }
        }
        table.fill(&s.z, bw);
        let acc = &mut state.functionals[fi].values[b * q..(b + 1) * q];
        spec.drift.eval_with(&table, &mut s.fval);
        spec.lie_sum_from(&table, &s.lifted, &mut s.jac, &mut s.lie);
        for ((a, f), l) in acc.iter_mut().zip(&s.fval).zip(&s.lie) {
            *a += (f + 0.5 * l) * dt;
        }
        for (k, alpha) in spec.alpha.iter().enumerate() {
            alpha.eval_with(&table, &mut s.fval);
            for (a, f) in acc.iter_mut().zip(&s.fval) {
                *a += f * dtheta[k];
            }
        }
    }
}

/// `X_0 dt + Σ_k X_k dθ_k` added into `out`.
fn combine_values(ev: &PointEval, n: usize, d: usize, dtheta: &[f64], dt: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(ev.value(0, n)) {
        *o += v * dt;
    }
    for k in 1..=d {
        let w = dtheta[k - 1];
        for (o, v) in out.iter_mut().zip(ev.value(k, n)) {
            *o += v * w;
        }
    }
}

/// `DX_0 dt + Σ_k DX_k dθ_k` written into `out`.
fn combine_jacobians(ev: &PointEval, n: usize, d: usize, dtheta: &[f64], dt: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(ev.jacobian(0, n)) {
        *o = v * dt;
    }
    for k in 1..=d {
        let w = dtheta[k - 1];
        for (o, v) in out.iter_mut().zip(ev.jacobian(k, n)) {
            *o += v * w;
        }
    }
}

/// Row-major `(r × m)·(m × c)`.
fn matmul(a: &[f64], b: &[f64], r: usize, m: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for l in 0..m {
                acc += a[i * m + l] * b[l * c + j];
            }
            out[i * c + j] = acc;
        }
    }
}

fn check_finite(state: &MultiPointState) -> Result<()> {
    let bad = |what: &str| {
        Err(FlowError::NonFinite {
            step: state.step,
            what: what.to_string(),
        })
    };
    if state.points.iter().any(|p| p.lift.iter().any(|v| !v.is_finite())) {
        return bad("point");
    }
    if let Some(f) = &state.frames {
        if f.matrices.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return bad("frame");
        }
    }
    if state.functionals.iter().any(|a| a.values.iter().any(|v| !v.is_finite())) {
        return bad("functional");
    }
    Ok(())
}

/// Steps `state` forward to grid time `t1`.
pub fn evolve(integrator: &mut Integrator, state: &mut MultiPointState, path: &NoisePath, t1: f64) -> Result<()> {
    evolve_observed(integrator, state, path, t1, |_| Ok(()))
}

/// As [`evolve`], calling `observer` after every step.
pub fn evolve_observed(
    integrator: &mut Integrator,
    state: &mut MultiPointState,
    path: &NoisePath,
    t1: f64,
    mut observer: impl FnMut(&MultiPointState) -> Result<()>,
) -> Result<()> {
    let target = grid_index(t1, state.dt)?;
    if target < state.step {
        return Err(FlowError::BackwardTime {
            from: state.step,
            to: target,
        });
    }
    let qr = integrator.qr_every;
    while state.step < target {
        integrator.step(state, path)?;
        // keyed on the absolute step so split runs renormalize at the same times
        if let (Some(k), Some(frames)) = (qr, state.frames.as_mut()) {
            if state.step.rem_euclid(k as i64) == 0 {
                frames.renormalize();
            }
        }
        observer(state)?;
    }
    Ok(())
}

/// CSV trajectory dump: one row per `(t, point)`.
pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, state: &MultiPointState) -> Result<Self> {
        let n = state.dim();
        let mut cols = vec!["t".to_string(), "point".to_string()];
        cols.extend((0..n).map(|i| format!("x{i}")));
        cols.extend((0..n).map(|i| format!("lift{i}")));
        if let Some(f) = &state.frames {
            for i in 0..n {
                for j in 0..f.columns {
                    cols.push(format!("frame{i}_{j}"));
                }
            }
        }
        for (fi, acc) in state.functionals.iter().enumerate() {
            cols.extend((0..acc.width).map(|c| format!("A{fi}_{c}")));
        }
        writeln!(out, "{}", cols.join(","))?;
        Ok(Self { out })
    }

    pub fn write(&mut self, state: &MultiPointState) -> Result<()> {
        for (p, pt) in state.points.iter().enumerate() {
            let mut row = vec![format!("{:.12e}", state.time()), p.to_string()];
            row.extend(pt.torus.iter().chain(&pt.lift).map(|v| format!("{v:.16e}")));
            if let Some(f) = &state.frames {
                row.extend(f.matrices[p].iter().map(|v| format!("{v:.16e}")));
            }
            for acc in &state.functionals {
                let block = acc.block(if acc.blocks() == 1 { 0 } else { p });
                row.extend(block.iter().map(|v| format!("{v:.16e}")));
            }
            writeln!(self.out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

//! Lie brackets of field expressions and numerical span-rank checks.
//!
//! Base fields use their exact Jacobians. Derivatives of composite bracket
//! expressions are taken by nested central differences, with the step growing
//! by a fixed factor for each extra level of nesting.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{PointEval, VectorFieldSet};
use crate::error::{FlowError, Result};
use crate::torus;
use crate::trig::PhaseTable;

/// Symbolic bracket tree over field indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldExpr {
    Base(usize),
    Bracket(Box<FieldExpr>, Box<FieldExpr>),
}

impl FieldExpr {
    pub fn base(k: usize) -> Self {
        FieldExpr::Base(k)
    }

    /// Number of nested brackets (0 for a base field).
    pub fn depth(&self) -> usize {
        match self {
            FieldExpr::Base(_) => 0,
            FieldExpr::Bracket(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn max_index(&self) -> usize {
        match self {
            FieldExpr::Base(k) => *k,
            FieldExpr::Bracket(a, b) => a.max_index().max(b.max_index()),
        }
    }
}

impl std::fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldExpr::Base(k) => write!(f, "X{k}"),
            FieldExpr::Bracket(a, b) => write!(f, "[{a},{b}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketConfig {
    /// Central-difference step for derivatives of depth-1 expressions.
    pub base_step: f64,
    /// Step multiplier per additional nesting level.
    pub step_growth: f64,
    pub max_depth: usize,
    /// Relative singular-value cutoff for numerical rank.
    pub rank_tolerance: f64,
}

impl Default for BracketConfig {
    fn default() -> Self {
        Self {
            base_step: 1e-4,
            step_growth: 10.0,
            max_depth: 6,
            rank_tolerance: 1e-8,
        }
    }
}

impl BracketConfig {
    fn step_for(&self, depth: usize) -> f64 {
        self.base_step * self.step_growth.powi(depth.saturating_sub(1) as i32)
    }
}

/// A family of vector fields on some `R^D` with exact first derivatives.
pub trait LieFamily {
    fn ambient_dim(&self) -> usize;
    fn count(&self) -> usize;
    fn eval(&self, k: usize, z: &[f64], out: &mut [f64]);
    /// `DV_k(z)·v`.
    fn jvp(&self, k: usize, z: &[f64], v: &[f64], out: &mut [f64]);
}

/// The fields of a set acting on a single point of `T^N`.
pub struct SinglePoint<'a>(pub &'a VectorFieldSet);

impl LieFamily for SinglePoint<'_> {
    fn ambient_dim(&self) -> usize {
        self.0.dim()
    }

    fn count(&self) -> usize {
        self.0.d() + 1
    }

    fn eval(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let table = PhaseTable::new(z, self.0.bandwidth());
        self.0.fields()[k].eval_with(&table, out);
    }

    fn jvp(&self, k: usize, z: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.0.dim();
        let j = self.0.fields()[k].jacobian(z);
        matvec(&j, n, v, out);
    }
}

/// Diagonal lift `(X_k(x¹), …, X_k(xⁿ))` acting on `(T^N)^n`.
pub struct MultiPoint<'a> {
    pub set: &'a VectorFieldSet,
    pub points: usize,
}

impl LieFamily for MultiPoint<'_> {
    fn ambient_dim(&self) -> usize {
        self.set.dim() * self.points
    }

    fn count(&self) -> usize {
        self.set.d() + 1
    }

    fn eval(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let n = self.set.dim();
        for p in 0..self.points {
            let table = PhaseTable::new(&z[p * n..(p + 1) * n], self.set.bandwidth());
            self.set.fields()[k].eval_with(&table, &mut out[p * n..(p + 1) * n]);
        }
    }

    fn jvp(&self, k: usize, z: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.set.dim();
        for p in 0..self.points {
            let j = self.set.fields()[k].jacobian(&z[p * n..(p + 1) * n]);
            matvec(&j, n, &v[p * n..(p + 1) * n], &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// Induced fields on the unit tangent bundle, embedded in `R^N × R^N`:
/// `X̃_k(x, u) = (X_k(x), (I − uuᵀ) DX_k(x) u)`.
pub struct Projective<'a>(pub &'a VectorFieldSet);

impl LieFamily for Projective<'_> {
    fn ambient_dim(&self) -> usize {
        2 * self.0.dim()
    }

    fn count(&self) -> usize {
        self.0.d() + 1
    }

    fn eval(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let n = self.0.dim();
        let (x, u) = z.split_at(n);
        let mut pe = PointEval::default();
        self.0.evaluate_all(x, &mut pe);
        out[..n].copy_from_slice(pe.value(k, n));
        let (_, vert) = out.split_at_mut(n);
        matvec(pe.jacobian(k, n), n, u, vert);
        let uw: f64 = u.iter().zip(vert.iter()).map(|(a, b)| a * b).sum();
        for (w, &ui) in vert.iter_mut().zip(u) {
            *w -= uw * ui;
        }
    }

    fn jvp(&self, k: usize, z: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.0.dim();
        let (x, u) = z.split_at(n);
        let (vx, vu) = v.split_at(n);
        let f = &self.0.fields()[k];
        let table = PhaseTable::new(x, self.0.bandwidth());
        let mut jac = vec![0.0; n * n];
        let mut djac = vec![0.0; n * n];
        f.jacobian_with(&table, &mut jac);
        f.jacobian_derivative_with(&table, vx, &mut djac);
        // horizontal part: DX·vx
        matvec(&jac, n, vx, &mut out[..n]);
        // w = DX u; dw = (dDX) u + DX vu
        let mut w = vec![0.0; n];
        matvec(&jac, n, u, &mut w);
        let mut dw = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        matvec(&djac, n, u, &mut dw);
        matvec(&jac, n, vu, &mut tmp);
        for (a, b) in dw.iter_mut().zip(&tmp) {
            *a += b;
        }
        // d[(I − uuᵀ)w] = dw − (vu·w + u·dw) u − (u·w) vu
        let uw: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        let vuw: f64 = vu.iter().zip(&w).map(|(a, b)| a * b).sum();
        let udw: f64 = u.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for i in 0..n {
            out[n + i] = dw[i] - (vuw + udw) * u[i] - uw * vu[i];
        }
    }
}

fn matvec(m: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for i in 0..n {
        out[i] = m[i * cols..(i + 1) * cols]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Forms `[e1, e2]`, rejecting trees deeper than the configured maximum.
pub fn lie_bracket(e1: &FieldExpr, e2: &FieldExpr, cfg: &BracketConfig) -> Result<FieldExpr> {
    let depth = 1 + e1.depth().max(e2.depth());
    if depth > cfg.max_depth {
        return Err(FlowError::BracketDepth {
            depth,
            max: cfg.max_depth,
        });
    }
    Ok(FieldExpr::Bracket(Box::new(e1.clone()), Box::new(e2.clone())))
}

/// Evaluates `e` for the fields of `set` at a torus point.
pub fn eval_expr(set: &VectorFieldSet, e: &FieldExpr, x: &[f64], cfg: &BracketConfig) -> Result<Vec<f64>> {
    eval_in(&SinglePoint(set), e, x, cfg)
}

/// Evaluates `e` in any field family.
pub fn eval_in<F: LieFamily>(family: &F, e: &FieldExpr, z: &[f64], cfg: &BracketConfig) -> Result<Vec<f64>> {
    if e.max_index() >= family.count() {
        return Err(FlowError::IndexOutOfRange {
            index: e.max_index(),
            limit: family.count(),
        });
    }
    if e.depth() > cfg.max_depth {
        return Err(FlowError::BracketDepth {
            depth: e.depth(),
            max: cfg.max_depth,
        });
    }
    Ok(eval_unchecked(family, e, z, cfg))
}

fn eval_unchecked<F: LieFamily>(family: &F, e: &FieldExpr, z: &[f64], cfg: &BracketConfig) -> Vec<f64> {
    let dim = family.ambient_dim();
    match e {
        FieldExpr::Base(k) => {
            let mut out = vec![0.0; dim];
            family.eval(*k, z, &mut out);
            out
        }
        FieldExpr::Bracket(a, b) => {
            let va = eval_unchecked(family, a, z, cfg);
            let vb = eval_unchecked(family, b, z, cfg);
            // [A,B] = DB·A − DA·B
            let db_va = directional(family, b, z, &va, cfg);
            let da_vb = directional(family, a, z, &vb, cfg);
            db_va.iter().zip(&da_vb).map(|(p, q)| p - q).collect()
        }
    }
}

fn directional<F: LieFamily>(family: &F, e: &FieldExpr, z: &[f64], v: &[f64], cfg: &BracketConfig) -> Vec<f64> {
    let dim = family.ambient_dim();
    let mut out = vec![0.0; dim];
    match e {
        FieldExpr::Base(k) => family.jvp(*k, z, v, &mut out),
        _ => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return out;
            }
            let h = cfg.step_for(e.depth());
            let zp: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + h * b / norm).collect();
            let zm: Vec<f64> = z.iter().zip(v).map(|(a, b)| a - h * b / norm).collect();
            let fp = eval_unchecked(family, e, &zp, cfg);
            let fm = eval_unchecked(family, e, &zm, cfg);
            for ((o, p), m) in out.iter_mut().zip(&fp).zip(&fm) {
                *o = (p - m) / (2.0 * h) * norm;
            }
        }
    }
    out
}

/// Right-normed brackets `[X_i, E]` of the generators up to `depth`, grouped by level.
pub fn bracket_levels(generators: &[usize], depth: usize) -> Vec<Vec<FieldExpr>> {
    let mut levels = vec![generators.iter().map(|&k| FieldExpr::Base(k)).collect::<Vec<_>>()];
    for _ in 0..depth {
        let prev = levels.last().expect("level 0 present");
        let mut next = Vec::new();
        for &i in generators {
            for e in prev {
                if *e == FieldExpr::Base(i) {
                    continue;
                }
                next.push(FieldExpr::Bracket(Box::new(FieldExpr::Base(i)), Box::new(e.clone())));
            }
        }
        levels.push(next);
    }
    levels
}

/// Outcome of a span-rank check. A failed check only means the brackets up to
/// `depth` do not span at this configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub target: usize,
    pub pass: bool,
    pub depth: usize,
    pub columns: usize,
    /// Rank after including brackets up to each level.
    pub rank_by_depth: Vec<usize>,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn message(&self) -> String {
        if self.pass {
            let reached = self
                .rank_by_depth
                .iter()
                .position(|&r| r == self.target)
                .unwrap_or(self.depth);
            format!("full rank {} reached at depth {reached}", self.target)
        } else {
            format!(
                "fail at depth {} (rank {} < {})",
                self.depth, self.rank, self.target
            )
        }
    }
}

/// Numerical rank of a column set with a relative singular-value cutoff.
pub fn numerical_rank(columns: &[Vec<f64>], dim: usize, tolerance: f64) -> (usize, Vec<f64>) {
    if columns.is_empty() {
        return (0, Vec::new());
    }
    let m = DMatrix::from_fn(dim, columns.len(), |i, j| columns[j][i]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|&&s| s > tolerance * top).count()
    } else {
        0
    };
    (rank, sv)
}

fn span_report<F: LieFamily>(
    family: &F,
    z: &[f64],
    depth: usize,
    target: usize,
    cfg: &BracketConfig,
    project: impl Fn(&mut Vec<f64>),
) -> Result<RankReport> {
    if depth > cfg.max_depth {
        return Err(FlowError::BracketDepth {
            depth,
            max: cfg.max_depth,
        });
    }
    let generators: Vec<usize> = (1..family.count()).collect();
    let dim = family.ambient_dim();
    let mut columns = Vec::new();
    let mut rank_by_depth = Vec::with_capacity(depth + 1);
    let mut last = (0, Vec::new());
    for level in bracket_levels(&generators, depth) {
        for e in &level {
            let mut v = eval_unchecked(family, e, z, cfg);
            project(&mut v);
            columns.push(v);
        }
        last = numerical_rank(&columns, dim, cfg.rank_tolerance);
        rank_by_depth.push(last.0);
    }
    Ok(RankReport {
        rank: last.0,
        target,
        pass: last.0 >= target,
        depth,
        columns: columns.len(),
        rank_by_depth,
        singular_values: last.1,
    })
}

/// Span rank of brackets of the diagonally lifted driving fields at the
/// configuration `points` (one point: hypoellipticity of `x_t`; two or more:
/// of the n-point motion off the generalized diagonal).
pub fn bracket_span_rank(
    set: &VectorFieldSet,
    points: &[Vec<f64>],
    depth: usize,
    cfg: &BracketConfig,
) -> Result<RankReport> {
    let n = set.dim();
    if points.is_empty() {
        return Err(FlowError::InvalidArgument("empty configuration".into()));
    }
    for p in points {
        if p.len() != n {
            return Err(FlowError::InvalidArgument("point dimension mismatch".into()));
        }
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if torus::distance(&points[i], &points[j]) <= 1e-12 {
                return Err(FlowError::OnDiagonal(i, j));
            }
        }
    }
    let z: Vec<f64> = points.iter().flatten().copied().collect();
    let family = MultiPoint {
        set,
        points: points.len(),
    };
    span_report(&family, &z, depth, n * points.len(), cfg, |_| {})
}

/// Span rank of brackets of the induced unit-tangent-bundle fields at `(x, u)`,
/// against `dim SM = 2N − 1`.
pub fn check_projective_hypoellipticity(
    set: &VectorFieldSet,
    x: &[f64],
    u: &[f64],
    depth: usize,
    cfg: &BracketConfig,
) -> Result<RankReport> {
    let n = set.dim();
    if x.len() != n || u.len() != n {
        return Err(FlowError::InvalidArgument("point dimension mismatch".into()));
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(FlowError::InvalidArgument(format!(
            "tangent direction must be a unit vector (|u| = {norm})"
        )));
    }
    let z: Vec<f64> = x.iter().chain(u).copied().collect();
    let u = u.to_vec();
    // keep only the component tangent to R^N × S^{N-1} at (x, u)
    span_report(&Projective(set), &z, depth, 2 * n - 1, cfg, move |v| {
        let uw: f64 = u.iter().zip(&v[n..]).map(|(a, b)| a * b).sum();
        for (w, &ui) in v[n..].iter_mut().zip(&u) {
            *w -= uw * ui;
        }
    })
}

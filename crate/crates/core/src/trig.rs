//! Vector-valued trigonometric polynomials on a product torus.
//!
//! A [`TrigMap`] is `f(z) = Σ_m a_m cos(2π m·z) + b_m sin(2π m·z)` with integer
//! modes `m` and real coefficient vectors `a_m, b_m`. Values, Jacobians and
//! directional second derivatives are exact closed forms of the coefficients.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{FlowError, Result};

/// One Fourier mode of a vector-valued trigonometric polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub mode: Vec<i32>,
    #[serde(rename = "cos")]
    pub cos_part: Vec<f64>,
    #[serde(rename = "sin")]
    pub sin_part: Vec<f64>,
}

impl TrigTerm {
    pub fn new(mode: Vec<i32>, cos_part: Vec<f64>, sin_part: Vec<f64>) -> Self {
        Self {
            mode,
            cos_part,
            sin_part,
        }
    }

    /// Scalar term `c·cos(2π m·z) + s·sin(2π m·z)`.
    pub fn scalar(mode: Vec<i32>, c: f64, s: f64) -> Self {
        Self::new(mode, vec![c], vec![s])
    }

    pub fn is_constant(&self) -> bool {
        self.mode.iter().all(|&m| m == 0)
    }

    pub fn bandwidth(&self) -> i32 {
        self.mode.iter().map(|m| m.abs()).max().unwrap_or(0)
    }
}

/// Per-point table of `e^{2πi k z_j}` for `|k| ≤ bandwidth`, shared by all maps
/// evaluated at the same point.
#[derive(Debug, Clone, Default)]
pub struct PhaseTable {
    bandwidth: usize,
    // cos/sin of 2π k z_j stored at [j * (B + 1) + k]
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PhaseTable {
    pub fn new(z: &[f64], bandwidth: i32) -> Self {
        let mut t = Self::default();
        t.fill(z, bandwidth);
        t
    }

    pub fn fill(&mut self, z: &[f64], bandwidth: i32) {
        let b = bandwidth.max(0) as usize;
        self.bandwidth = b;
        let stride = b + 1;
        self.cos.resize(z.len() * stride, 0.0);
        self.sin.resize(z.len() * stride, 0.0);
        for (j, &zj) in z.iter().enumerate() {
            self.cos[j * stride] = 1.0;
            self.sin[j * stride] = 0.0;
            for k in 1..=b {
                let (s, c) = (TAU * k as f64 * zj).sin_cos();
                self.cos[j * stride + k] = c;
                self.sin[j * stride + k] = s;
            }
        }
    }

    /// `(cos 2π m·z, sin 2π m·z)`.
    #[inline]
    pub fn phase(&self, mode: &[i32]) -> (f64, f64) {
        let stride = self.bandwidth + 1;
        let (mut re, mut im) = (1.0, 0.0);
        for (j, &m) in mode.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let k = m.unsigned_abs() as usize;
            let c = self.cos[j * stride + k];
            let s = if m < 0 {
                -self.sin[j * stride + k]
            } else {
                self.sin[j * stride + k]
            };
            let nre = re * c - im * s;
            im = re * s + im * c;
            re = nre;
        }
        (re, im)
    }
}

/// Trigonometric polynomial map `T^input_dim → R^output_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigMap {
    input_dim: usize,
    output_dim: usize,
    terms: Vec<TrigTerm>,
}

impl TrigMap {
    pub fn new(input_dim: usize, output_dim: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        for t in &terms {
            if t.mode.len() != input_dim {
                return Err(FlowError::InvalidArgument(format!(
                    "mode {:?} has length {}, expected {}",
                    t.mode,
                    t.mode.len(),
                    input_dim
                )));
            }
            if t.cos_part.len() != output_dim || t.sin_part.len() != output_dim {
                return Err(FlowError::InvalidArgument(format!(
                    "coefficient length mismatch for mode {:?}: expected {}",
                    t.mode, output_dim
                )));
            }
            if t
                .cos_part
                .iter()
                .chain(&t.sin_part)
                .any(|v| !v.is_finite())
            {
                return Err(FlowError::InvalidArgument(format!(
                    "non-finite coefficient for mode {:?}",
                    t.mode
                )));
            }
        }
        Ok(Self {
            input_dim,
            output_dim,
            terms,
        })
    }

    pub fn zero(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            terms: Vec::new(),
        }
    }

    /// Constant map with value `c`.
    pub fn constant(input_dim: usize, c: &[f64]) -> Self {
        Self {
            input_dim,
            output_dim: c.len(),
            terms: vec![TrigTerm::new(
                vec![0; input_dim],
                c.to_vec(),
                vec![0.0; c.len()],
            )],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn bandwidth(&self) -> i32 {
        self.terms.iter().map(TrigTerm::bandwidth).max().unwrap_or(0)
    }

    /// Coefficient of the constant mode (the mean over the torus).
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        for t in self.terms.iter().filter(|t| t.is_constant()) {
            for (o, c) in out.iter_mut().zip(&t.cos_part) {
                *o += c;
            }
        }
        out
    }

    /// Returns `self - c` (shifts the constant mode).
    pub fn shifted(&self, c: &[f64]) -> Self {
        assert_eq!(c.len(), self.output_dim);
        let mut out = self.clone();
        if c.iter().all(|&v| v == 0.0) {
            return out;
        }
        match out.terms.iter_mut().find(|t| t.is_constant()) {
            Some(t) => {
                for (a, v) in t.cos_part.iter_mut().zip(c) {
                    *a -= v;
                }
            }
            None => out.terms.push(TrigTerm::new(
                vec![0; self.input_dim],
                c.iter().map(|v| -v).collect(),
                vec![0.0; self.output_dim],
            )),
        }
        out
    }

    /// Linear combination `Σ w_i f_i` of maps with equal shapes.
    pub fn combine(parts: &[(f64, &TrigMap)]) -> Result<Self> {
        let (_, first) = parts
            .first()
            .ok_or_else(|| FlowError::InvalidArgument("empty combination".into()))?;
        let mut terms = Vec::new();
        for (w, m) in parts {
            if m.input_dim != first.input_dim || m.output_dim != first.output_dim {
                return Err(FlowError::InvalidArgument("shape mismatch in combination".into()));
            }
            for t in &m.terms {
                terms.push(TrigTerm::new(
                    t.mode.clone(),
                    t.cos_part.iter().map(|v| w * v).collect(),
                    t.sin_part.iter().map(|v| w * v).collect(),
                ));
            }
        }
        Self::new(first.input_dim, first.output_dim, terms)
    }

    /// Accumulates `f(z)` into `out` using a prepared phase table.
    #[inline]
    pub fn eval_with(&self, table: &PhaseTable, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            let (c, s) = table.phase(&t.mode);
            for ((o, a), b) in out.iter_mut().zip(&t.cos_part).zip(&t.sin_part) {
                *o += a * c + b * s;
            }
        }
    }

    /// Row-major Jacobian `∂f_i/∂z_j` into `out` (length output·input).
    #[inline]
    pub fn jacobian_with(&self, table: &PhaseTable, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.input_dim;
        for t in &self.terms {
            if t.is_constant() {
                continue;
            }
            let (c, s) = table.phase(&t.mode);
            for i in 0..self.output_dim {
                let g = TAU * (-t.cos_part[i] * s + t.sin_part[i] * c);
                if g == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (r, &m) in row.iter_mut().zip(&t.mode) {
                    *r += m as f64 * g;
                }
            }
        }
    }

    /// Derivative of the Jacobian along `v`: `d/dε Df(z + εv)` at ε = 0, row-major.
    pub fn jacobian_derivative_with(&self, table: &PhaseTable, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.input_dim;
        for t in &self.terms {
            if t.is_constant() {
                continue;
            }
            let mv: f64 = t.mode.iter().zip(v).map(|(&m, &x)| m as f64 * x).sum();
            if mv == 0.0 {
                continue;
            }
            let (c, s) = table.phase(&t.mode);
            for i in 0..self.output_dim {
                let g = -TAU * TAU * mv * (t.cos_part[i] * c + t.sin_part[i] * s);
                let row = &mut out[i * n..(i + 1) * n];
                for (r, &m) in row.iter_mut().zip(&t.mode) {
                    *r += m as f64 * g;
                }
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let table = PhaseTable::new(z, self.bandwidth());
        let mut out = vec![0.0; self.output_dim];
        self.eval_with(&table, &mut out);
        out
    }

    pub fn jacobian(&self, z: &[f64]) -> Vec<f64> {
        let table = PhaseTable::new(z, self.bandwidth());
        let mut out = vec![0.0; self.output_dim * self.input_dim];
        self.jacobian_with(&table, &mut out);
        out
    }

    /// Writes the map as a `TrigMap` on a larger torus where this map reads
    /// coordinates `offset..offset + input_dim`.
    pub fn embed(&self, total_dim: usize, offset: usize) -> Self {
        assert!(offset + self.input_dim <= total_dim);
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut mode = vec![0; total_dim];
                mode[offset..offset + self.input_dim].copy_from_slice(&t.mode);
                TrigTerm::new(mode, t.cos_part.clone(), t.sin_part.clone())
            })
            .collect();
        Self {
            input_dim: total_dim,
            output_dim: self.output_dim,
            terms,
        }
    }

    /// Extracts one output component as a scalar map.
    pub fn component(&self, i: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| TrigTerm::scalar(t.mode.clone(), t.cos_part[i], t.sin_part[i]))
            .collect();
        Self {
            input_dim: self.input_dim,
            output_dim: 1,
            terms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(map: &TrigMap, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; map.output_dim()];
        for t in map.terms() {
            let arg: f64 = t.mode.iter().zip(z).map(|(&m, &x)| m as f64 * x).sum::<f64>() * TAU;
            for i in 0..out.len() {
                out[i] += t.cos_part[i] * arg.cos() + t.sin_part[i] * arg.sin();
            }
        }
        out
    }

    fn sample_map() -> TrigMap {
        TrigMap::new(
            3,
            2,
            vec![
                TrigTerm::new(vec![1, -2, 0], vec![0.3, -1.1], vec![0.7, 0.2]),
                TrigTerm::new(vec![0, 0, 0], vec![0.5, 0.25], vec![0.0, 0.0]),
                TrigTerm::new(vec![-1, 1, 3], vec![-0.4, 0.9], vec![0.1, -0.6]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn phase_table_matches_direct_sum() {
        let m = sample_map();
        for z in [[0.1, 0.2, 0.3], [0.91, 0.05, 0.77], [0.0, 0.5, 0.25]] {
            let a = m.eval(&z);
            let b = naive(&m, &z);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-13, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn jacobian_matches_central_difference() {
        let m = sample_map();
        let z = [0.13, 0.61, 0.42];
        let j = m.jacobian(&z);
        let h = 1e-6;
        for col in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[col] += h;
            zm[col] -= h;
            let (fp, fm) = (naive(&m, &zp), naive(&m, &zm));
            for row in 0..2 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!((fd - j[row * 3 + col]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn jacobian_derivative_matches_difference_of_jacobians() {
        let m = sample_map();
        let z = [0.27, 0.33, 0.08];
        let v = [0.3, -0.5, 0.2];
        let table = PhaseTable::new(&z, m.bandwidth());
        let mut dj = vec![0.0; 6];
        m.jacobian_derivative_with(&table, &v, &mut dj);
        let h = 1e-6;
        let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (jp, jm) = (m.jacobian(&zp), m.jacobian(&zm));
        for k in 0..6 {
            let fd = (jp[k] - jm[k]) / (2.0 * h);
            assert!((fd - dj[k]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn shift_moves_only_the_mean() {
        let m = sample_map();
        let s = m.shifted(&[0.5, 0.25]);
        assert_eq!(s.mean(), vec![0.0, 0.0]);
        let z = [0.3, 0.1, 0.9];
        let (a, b) = (m.eval(&z), s.eval(&z));
        assert!((a[0] - b[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(TrigMap::new(2, 1, vec![TrigTerm::scalar(vec![1], 1.0, 0.0)]).is_err());
        assert!(TrigMap::new(1, 1, vec![TrigTerm::scalar(vec![1], f64::NAN, 0.0)]).is_err());
    }
}

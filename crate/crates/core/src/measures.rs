//! Weighted particle clouds on `T^N`: energies, pushforward, displacement samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::fields::VectorFieldSet;
use crate::flow::{evolve, Integrator, Scheme};
use crate::noise::NoisePath;
use crate::torus::{distance, wrap, LiftedPoint};
use crate::trig::TrigMap;

/// Particles per parallel work item. Fixed so that reductions do not depend
/// on the number of worker threads.
pub const CHUNK: usize = 256;

/// A weighted particle cloud. `origin` keeps each particle's starting torus
/// coordinates for displacement statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    pub particles: Vec<LiftedPoint>,
    pub weights: Vec<f64>,
    pub origin: Vec<Vec<f64>>,
}

impl ParticleMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(FlowError::InvalidArgument("empty particle cloud".into()));
        }
        if points.len() != weights.len() {
            return Err(FlowError::InvalidArgument("points/weights length mismatch".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(FlowError::InvalidArgument("particles of mixed dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(FlowError::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let particles: Vec<LiftedPoint> = points.iter().map(|p| LiftedPoint::at(p)).collect();
        let origin = particles.iter().map(|p| p.torus.clone()).collect();
        Ok(Self {
            particles,
            weights,
            origin,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform_weights(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].dim()
    }

    pub fn total_mass(&self) -> f64 {
        neumaier(self.weights.iter().copied())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * c).collect(),
            ..self.clone()
        }
    }

    /// Effective sample size `(Σw)² / Σw²`.
    pub fn effective_size(&self) -> f64 {
        let s = self.total_mass();
        s * s / neumaier(self.weights.iter().map(|w| w * w))
    }

    pub fn torus_points(&self) -> Vec<Vec<f64>> {
        self.particles.iter().map(|p| p.torus.clone()).collect()
    }

    /// Drops the displacement history: lifts restart at the current torus points.
    pub fn restarted(&self) -> Self {
        let particles: Vec<LiftedPoint> = self.particles.iter().map(|p| LiftedPoint::at(&p.torus)).collect();
        Self {
            origin: particles.iter().map(|p| p.torus.clone()).collect(),
            particles,
            weights: self.weights.clone(),
        }
    }
}

/// Compensated (Neumaier) sum.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `n` points uniform in the Euclidean ball of radius `radius < ½` around `center`.
pub fn uniform_ball(center: &[f64], radius: f64, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(radius > 0.0 && radius < 0.5) {
        return Err(FlowError::InvalidArgument(format!("ball radius {radius} not in (0, 0.5)")));
    }
    let dim = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
            center.iter().zip(&dir).map(|(c, u)| wrap(c + r * u / norm)).collect()
        })
        .collect())
}

/// Cell-centred grid with `side` points per axis.
pub fn grid(dim: usize, side: usize) -> Vec<Vec<f64>> {
    let total = side.pow(dim as u32);
    (0..total)
        .map(|idx| {
            let mut rem = idx;
            (0..dim)
                .map(|_| {
                    let i = rem % side;
                    rem /= side;
                    (i as f64 + 0.5) / side as f64
                })
                .collect()
        })
        .collect()
}

/// `n` equally spaced points on a circle of radius `radius` in the `(x₁, x₂)` plane.
pub fn circle(center: &[f64], radius: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    if center.len() < 2 {
        return Err(FlowError::InvalidArgument("circle needs dimension >= 2".into()));
    }
    Ok((0..n)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / n as f64;
            let mut p = center.to_vec();
            p[0] = wrap(p[0] + radius * phi.cos());
            p[1] = wrap(p[1] + radius * phi.sin());
            p
        })
        .collect())
}

/// `n` points uniform on `T^N`.
pub fn uniform_torus(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// Initial measure description used by manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Ball { center: Vec<f64>, radius: f64, count: usize, seed: u64 },
    Grid { side: usize },
    Circle { center: Vec<f64>, radius: f64, count: usize },
    Uniform { count: usize, seed: u64 },
}

impl MeasureSpec {
    pub fn build(&self, dim: usize) -> Result<ParticleMeasure> {
        let pts = match self {
            MeasureSpec::Ball { center, radius, count, seed } => {
                check_dim(center, dim)?;
                uniform_ball(center, *radius, *count, *seed)?
            }
            MeasureSpec::Grid { side } => grid(dim, *side),
            MeasureSpec::Circle { center, radius, count } => {
                check_dim(center, dim)?;
                circle(center, *radius, *count)?
            }
            MeasureSpec::Uniform { count, seed } => uniform_torus(dim, *count, *seed),
        };
        ParticleMeasure::uniform_weights(pts)
    }

    pub fn count(&self, dim: usize) -> usize {
        match self {
            MeasureSpec::Ball { count, .. } | MeasureSpec::Circle { count, .. } | MeasureSpec::Uniform { count, .. } => *count,
            MeasureSpec::Grid { side } => side.pow(dim as u32),
        }
    }
}

fn check_dim(center: &[f64], dim: usize) -> Result<()> {
    if center.len() != dim {
        return Err(FlowError::InvalidArgument(format!(
            "center of dimension {} for N = {dim}",
            center.len()
        )));
    }
    Ok(())
}

/// `I_p(ν) = Σ_{i≠j} w_i w_j / d(x_i, x_j)^p` with the torus metric.
///
/// Returns `+∞` when two distinct particles coincide. Rows are summed in
/// parallel with compensated accumulation and combined in index order.
pub fn p_energy(nu: &ParticleMeasure, p: f64) -> Result<f64> {
    if nu.len() < 2 {
        return Err(FlowError::InvalidArgument(
            "p-energy needs at least two particles".into(),
        ));
    }
    if !(p > 0.0) {
        return Err(FlowError::InvalidArgument(format!("exponent p = {p} must be positive")));
    }
    let n = nu.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| {
            let xi = &nu.particles[i].torus;
            let wi = nu.weights[i];
            // pairs i < j, doubled
            let dists: Vec<f64> = ((i + 1)..n).map(|j| distance(xi, &nu.particles[j].torus)).collect();
            if dists.contains(&0.0) {
                return f64::INFINITY;
            }
            neumaier(dists.iter().zip(&nu.weights[i + 1..]).map(|(d, wj)| wi * wj / d.powf(p)))
        })
        .collect();
    if rows.iter().any(|r| r.is_infinite()) {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 * neumaier(rows))
}

/// Evolves every particle from grid time `t0` to `t1` under the shared `path`.
pub fn pushforward_between(
    fields: &VectorFieldSet,
    nu: &ParticleMeasure,
    path: &NoisePath,
    scheme: Scheme,
    t0: f64,
    t1: f64,
) -> Result<ParticleMeasure> {
    let dt = path.dt();
    let chunks: Vec<Result<Vec<LiftedPoint>>> = nu
        .particles
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut integ = Integrator::new(fields.clone(), scheme).with_qr_every(None);
            let starts: Vec<Vec<f64>> = chunk.iter().map(|p| p.torus.clone()).collect();
            let mut st = integ.initial_state(&starts, t0, dt, None)?;
            // keep the incoming lifts
            for (s, p) in st.points.iter_mut().zip(chunk) {
                s.lift = p.lift.clone();
            }
            evolve(&mut integ, &mut st, path, t1)?;
            Ok(st.points)
        })
        .collect();
    let mut particles = Vec::with_capacity(nu.len());
    for c in chunks {
        particles.extend(c?);
    }
    Ok(ParticleMeasure {
        particles,
        weights: nu.weights.clone(),
        origin: nu.origin.clone(),
    })
}

/// `ν_t`: pushforward over `[0, t]`.
pub fn pushforward(
    fields: &VectorFieldSet,
    nu: &ParticleMeasure,
    path: &NoisePath,
    scheme: Scheme,
    t: f64,
) -> Result<ParticleMeasure> {
    pushforward_between(fields, nu, path, scheme, 0.0, t)
}

/// `∫ b dν` for a scalar trigonometric observable with zero constant mode.
pub fn observable_average(nu: &ParticleMeasure, b: &TrigMap) -> Result<f64> {
    if b.output_dim() != 1 || b.input_dim() != nu.dim() {
        return Err(FlowError::InvalidArgument("observable must be scalar on T^N".into()));
    }
    if b.mean()[0] != 0.0 {
        return Err(FlowError::InvalidArgument("observable has a nonzero constant mode".into()));
    }
    let total = nu.total_mass();
    let parts: Vec<f64> = nu
        .particles
        .par_chunks(CHUNK)
        .zip(nu.weights.par_chunks(CHUNK))
        .map(|(ps, ws)| neumaier(ps.iter().zip(ws).map(|(p, w)| w * b.eval(&p.torus)[0])))
        .collect();
    Ok(neumaier(parts) / total)
}

/// Weighted sample `(lift − origin − v t)/√t` representing the displacement measure.
pub fn displacement_sample(nu_t: &ParticleMeasure, drift: &[f64], t: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if !(t > 0.0) {
        return Err(FlowError::InvalidArgument(format!("t = {t} must be positive")));
    }
    if drift.len() != nu_t.dim() {
        return Err(FlowError::InvalidArgument("drift dimension mismatch".into()));
    }
    let scale = t.sqrt();
    let sample = nu_t
        .particles
        .iter()
        .zip(&nu_t.origin)
        .map(|(p, o)| {
            p.lift
                .iter()
                .zip(o)
                .zip(drift)
                .map(|((l, x0), v)| (l - x0 - v * t) / scale)
                .collect()
        })
        .collect();
    Ok((sample, nu_t.weights.clone()))
}

/// Writes `weight, x…, lift…` rows.
pub fn write_cloud_csv(nu: &ParticleMeasure, mut out: impl Write) -> Result<()> {
    let n = nu.dim();
    let mut header = vec!["weight".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..n).map(|i| format!("lift{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (p, w) in nu.particles.iter().zip(&nu.weights) {
        let mut row = vec![format!("{w:.16e}")];
        row.extend(p.torus.iter().chain(&p.lift).map(|v| format!("{v:.16e}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a cloud written by [`write_cloud_csv`]; origins restart at the lifts' wraps.
pub fn read_cloud_csv(input: impl BufRead) -> Result<ParticleMeasure> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| FlowError::Parse("empty cloud file".into()))??;
    let cols = header.split(',').count();
    if cols < 3 || (cols - 1) % 2 != 0 {
        return Err(FlowError::Parse(format!("bad cloud header {header:?}")));
    }
    let n = (cols - 1) / 2;
    let mut weights = Vec::new();
    let mut particles = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FlowError::Parse(format!("line {}: {e}", lineno + 2)))?;
        if vals.len() != cols {
            return Err(FlowError::Parse(format!("line {}: expected {cols} values", lineno + 2)));
        }
        weights.push(vals[0]);
        particles.push(LiftedPoint::from_lift(vals[1 + n..].to_vec()));
    }
    let points = particles.iter().map(|p| p.torus.clone()).collect();
    let mut nu = ParticleMeasure::new(points, weights)?;
    nu.particles = particles;
    Ok(nu)
}

pub fn write_cloud_file(nu: &ParticleMeasure, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_cloud_csv(nu, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trig::TrigTerm;

    #[test]
    fn two_atoms_energy() {
        let nu = ParticleMeasure::new(vec![vec![0.1, 0.2], vec![0.6, 0.2]], vec![0.5, 0.5]).unwrap();
        assert!((p_energy(&nu, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let same = ParticleMeasure::new(vec![vec![0.3, 0.3], vec![0.3, 0.3]], vec![0.5, 0.5]).unwrap();
        assert_eq!(p_energy(&same, 1.0).unwrap(), f64::INFINITY);
        let single = ParticleMeasure::new(vec![vec![0.3, 0.3]], vec![1.0]).unwrap();
        assert!(p_energy(&single, 1.0).is_err());
        assert!(p_energy(&nu, 0.0).is_err());
    }

    #[test]
    fn grid_energy_matches_brute_force() {
        let nu = ParticleMeasure::uniform_weights(grid(2, 32)).unwrap();
        let pts = nu.torus_points();
        let mut brute = 0.0;
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if i != j {
                    let mut d2 = 0.0;
                    for k in 0..2 {
                        let mut diff = (pts[i][k] - pts[j][k]).abs();
                        if diff > 0.5 {
                            diff = 1.0 - diff;
                        }
                        d2 += diff * diff;
                    }
                    brute += nu.weights[i] * nu.weights[j] / d2.sqrt().powf(0.5);
                }
            }
        }
        let e = p_energy(&nu, 0.5).unwrap();
        assert!(((e - brute) / brute).abs() < 1e-12);
    }

    #[test]
    fn energy_scales_with_mass_squared() {
        let nu = ParticleMeasure::uniform_weights(uniform_torus(3, 200, 4)).unwrap();
        let e = p_energy(&nu, 0.7).unwrap();
        let e3 = p_energy(&nu.scaled(3.0), 0.7).unwrap();
        assert!((e3 - 9.0 * e).abs() < 1e-12 * e3);
        let mut rev = nu.clone();
        rev.particles.reverse();
        rev.weights.reverse();
        assert!((p_energy(&rev, 0.7).unwrap() - e).abs() < 1e-12 * e);
    }

    #[test]
    fn grid_orthogonality() {
        let nu = ParticleMeasure::uniform_weights(grid(2, 64)).unwrap();
        for mode in [vec![1, 0], vec![3, -2], vec![0, 5], vec![63, 1]] {
            let b = TrigMap::new(2, 1, vec![TrigTerm::scalar(mode, 1.0, 1.0)]).unwrap();
            assert!(observable_average(&nu, &b).unwrap().abs() < 1e-12);
        }
        let zero = TrigMap::zero(2, 1);
        assert_eq!(observable_average(&nu, &zero).unwrap(), 0.0);
        let atom = ParticleMeasure::new(vec![vec![0.1, 0.7]], vec![1.0]).unwrap();
        let b = TrigMap::new(2, 1, vec![TrigTerm::scalar(vec![1, 1], 0.5, -0.25)]).unwrap();
        assert!((observable_average(&atom, &b).unwrap() - b.eval(&[0.1, 0.7])[0]).abs() < 1e-15);
        let biased = TrigMap::constant(2, &[1.0]);
        assert!(observable_average(&nu, &biased).is_err());
    }

    #[test]
    fn generators_stay_on_their_supports() {
        let ball = uniform_ball(&[0.95, 0.5], 0.1, 500, 1).unwrap();
        assert!(ball.iter().all(|p| distance(p, &[0.95, 0.5]) <= 0.1 + 1e-12));
        let c = circle(&[0.5, 0.5], 0.2, 100).unwrap();
        assert!(c.iter().all(|p| (distance(p, &[0.5, 0.5]) - 0.2).abs() < 1e-12));
        assert_eq!(grid(3, 4).len(), 64);
        assert!(uniform_ball(&[0.5], 0.6, 1, 0).is_err());
    }

    #[test]
    fn zero_and_constant_pushforward() {
        let nu = ParticleMeasure::uniform_weights(uniform_torus(2, 600, 2)).unwrap();
        let path = NoisePath::new(3, 0, 2, 1e-2, 0, 100).unwrap();
        let zero = VectorFieldSet::zero(2, 2);
        let same = pushforward(&zero, &nu, &path, Scheme::Heun, 1.0).unwrap();
        assert_eq!(same, nu);
        let ident = pushforward(&random(), &nu, &path, Scheme::Heun, 0.0).unwrap();
        assert_eq!(ident, nu);
        let c = vec![vec![0.2, 0.1], vec![1.0, -0.5], vec![0.3, 0.8]];
        let set = VectorFieldSet::constant(2, &c).unwrap();
        let moved = pushforward(&set, &nu, &path, Scheme::ItoEuler, 1.0).unwrap();
        let theta = path.value(100).unwrap();
        for (p, q) in moved.particles.iter().zip(&nu.particles) {
            for i in 0..2 {
                let shift = c[0][i] + c[1][i] * theta[0] + c[2][i] * theta[1];
                assert!((p.lift[i] - q.lift[i] - shift).abs() < 1e-12);
            }
        }
        let e0 = p_energy(&nu, 0.5).unwrap();
        let e1 = p_energy(&moved, 0.5).unwrap();
        assert!((e0 - e1).abs() < 1e-9 * e0);
        assert_eq!(moved.total_mass(), nu.total_mass());
        let (sample, _) = displacement_sample(&moved, &[0.0, 0.0], 1.0).unwrap();
        for s in &sample {
            assert!((s[0] - sample[0][0]).abs() < 1e-12 && (s[1] - sample[0][1]).abs() < 1e-12);
        }
    }

    fn random() -> VectorFieldSet {
        crate::fields::make_field_set(&crate::fields::FieldSetSpec::random(2, 2, 1, 3, true)).unwrap()
    }

    #[test]
    fn pushforward_is_independent_of_chunking() {
        let set = random();
        let nu = ParticleMeasure::uniform_weights(uniform_torus(2, 700, 5)).unwrap();
        let path = NoisePath::new(3, 0, 2, 1e-2, 0, 50).unwrap();
        let all = pushforward(&set, &nu, &path, Scheme::Heun, 0.5).unwrap();
        for (i, p) in nu.particles.iter().enumerate().step_by(97) {
            let one = ParticleMeasure::new(vec![p.torus.clone()], vec![1.0]).unwrap();
            let moved = pushforward(&set, &one, &path, Scheme::Heun, 0.5).unwrap();
            assert_eq!(moved.particles[0], all.particles[i]);
        }
    }

    #[test]
    fn displacement_scaling() {
        let zero = VectorFieldSet::zero(2, 1);
        let nu = ParticleMeasure::uniform_weights(uniform_torus(2, 10, 1)).unwrap();
        let path = NoisePath::new(3, 0, 1, 1e-2, 0, 100).unwrap();
        let moved = pushforward(&zero, &nu, &path, Scheme::Heun, 1.0).unwrap();
        let (s, _) = displacement_sample(&moved, &[0.0, 0.0], 1.0).unwrap();
        assert!(s.iter().flatten().all(|v| *v == 0.0));
        let mut lifted = nu.clone();
        for (p, o) in lifted.particles.iter_mut().zip(&nu.origin) {
            p.lift = o.iter().map(|x| x + 0.3).collect();
        }
        let (a, _) = displacement_sample(&lifted, &[0.0, 0.0], 1.0).unwrap();
        let mut doubled = lifted.clone();
        for (p, o) in doubled.particles.iter_mut().zip(&nu.origin) {
            p.lift = o.iter().map(|x| x + 0.6).collect();
        }
        let (b, _) = displacement_sample(&doubled, &[0.0, 0.0], 4.0).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_round_trip() {
        let set = random();
        let nu = ParticleMeasure::uniform_weights(uniform_torus(2, 20, 8)).unwrap();
        let path = NoisePath::new(3, 0, 2, 1e-2, 0, 300).unwrap();
        let moved = pushforward(&set, &nu, &path, Scheme::Heun, 3.0).unwrap();
        let mut buf = Vec::new();
        write_cloud_csv(&moved, &mut buf).unwrap();
        let back = read_cloud_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.particles, moved.particles);
        assert_eq!(back.weights, moved.weights);
    }
}

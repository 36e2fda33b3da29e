//! Seeded two-sided Brownian paths on a uniform grid.
//!
//! Increments are a pure function of `(seed, stream_id, level, index)`: a
//! counter-based hash feeds a Box–Muller transform, so any increment can be
//! recomputed without storing the path and the path can be extended in either
//! direction. Increments are held as integer multiples of [`QUANTUM`], which
//! makes bridge refinement and partial sums exact.

use crate::error::{FlowError, Result};

/// Resolution of stored increments (2⁻⁴⁴).
pub const QUANTUM: f64 = 1.0 / 17_592_186_044_416.0;

pub const DEFAULT_MAX_LEVEL: u32 = 16;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn counter_key(seed: u64, stream: u64, level: u32, index: i64, component: usize) -> u64 {
    let mut h = mix(seed);
    h = mix(h ^ stream);
    h = mix(h ^ u64::from(level));
    h = mix(h ^ index as u64);
    mix(h ^ component as u64)
}

/// Standard normal draw determined entirely by `key`.
#[inline]
pub fn counter_normal(key: u64) -> f64 {
    const SCALE: f64 = 1.0 / 9_007_199_254_740_992.0; // 2⁻⁵³
    let a = mix(key ^ 0x5851_F42D_4C95_7F2D);
    let b = mix(key ^ 0x1405_7B7E_F767_814F);
    let u1 = ((a >> 11) as f64 + 1.0) * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A grid-sampled `R^d` Brownian path `θ` with `θ(0) = 0`.
///
/// Increment `i` covers `[i·dt, (i+1)·dt]`; valid increment indices are
/// `min_index..max_index`, so values are defined on `min_index..=max_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    d: usize,
    base_dt: f64,
    level: u32,
    max_level: u32,
    min_index: i64,
    max_index: i64,
    seed: u64,
    stream_id: u64,
}

impl NoisePath {
    pub fn new(seed: u64, stream_id: u64, d: usize, dt: f64, min_index: i64, max_index: i64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FlowError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if d == 0 {
            return Err(FlowError::InvalidArgument("noise dimension must be >= 1".into()));
        }
        if min_index >= max_index {
            return Err(FlowError::InvalidArgument(format!(
                "empty range [{min_index}, {max_index})"
            )));
        }
        Ok(Self {
            d,
            base_dt: dt,
            level: 0,
            max_level: DEFAULT_MAX_LEVEL,
            min_index,
            max_index,
            seed,
            stream_id,
        })
    }

    /// Path covering times `[t0, t1]`, both rounded to the grid.
    pub fn covering(seed: u64, stream_id: u64, d: usize, dt: f64, t0: f64, t1: f64) -> Result<Self> {
        let lo = (t0 / dt).floor() as i64;
        let hi = (t1 / dt).ceil() as i64;
        Self::new(seed, stream_id, d, dt, lo, hi.max(lo + 1))
    }

    pub fn with_max_level(mut self, max_level: u32) -> Self {
        self.max_level = max_level;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.base_dt / f64::from(1u32 << self.level)
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn range(&self) -> (i64, i64) {
        (self.min_index, self.max_index)
    }

    /// Same generator over a wider index range; existing increments are unchanged.
    pub fn extend(&self, min_index: i64, max_index: i64) -> Self {
        Self {
            min_index: min_index.min(self.min_index),
            max_index: max_index.max(self.max_index),
            ..self.clone()
        }
    }

    /// Brownian-bridge refinement to step `dt/2`. Each coarse increment equals
    /// the sum of its two halves exactly.
    pub fn refine(&self) -> Result<Self> {
        if self.level >= self.max_level {
            return Err(FlowError::RefinementDepth {
                level: self.level + 1,
                max: self.max_level,
            });
        }
        Ok(Self {
            level: self.level + 1,
            min_index: 2 * self.min_index,
            max_index: 2 * self.max_index,
            ..self.clone()
        })
    }

    fn units_at(&self, level: u32, index: i64, component: usize) -> i64 {
        if level == 0 {
            let z = counter_normal(counter_key(self.seed, self.stream_id, 0, index, component));
            return (z * self.base_dt.sqrt() / QUANTUM).round() as i64;
        }
        let parent_index = index.div_euclid(2);
        let parent = self.units_at(level - 1, parent_index, component);
        let parent_dt = self.base_dt / f64::from(1u32 << (level - 1));
        let z = counter_normal(counter_key(self.seed, self.stream_id, level, parent_index, component));
        let deviation = (z * (0.25 * parent_dt).sqrt() / QUANTUM).round() as i64;
        let first = parent.div_euclid(2) + deviation;
        if index.rem_euclid(2) == 0 {
            first
        } else {
            parent - first
        }
    }

    fn check(&self, index: i64) -> Result<()> {
        if index < self.min_index || index >= self.max_index {
            return Err(FlowError::OutsidePath {
                index,
                min: self.min_index,
                max: self.max_index,
            });
        }
        Ok(())
    }

    /// Increment `i` in units of [`QUANTUM`].
    pub fn increment_units(&self, index: i64) -> Result<Vec<i64>> {
        self.check(index)?;
        Ok((0..self.d).map(|c| self.units_at(self.level, index, c)).collect())
    }

    pub fn increment(&self, index: i64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.increment_into(index, &mut out)?;
        Ok(out)
    }

    pub fn increment_into(&self, index: i64, out: &mut [f64]) -> Result<()> {
        self.check(index)?;
        for (c, o) in out.iter_mut().enumerate().take(self.d) {
            *o = self.units_at(self.level, index, c) as f64 * QUANTUM;
        }
        Ok(())
    }

    /// `θ(i·dt)` in units of [`QUANTUM`]; exact partial sums anchored at `θ(0) = 0`.
    pub fn value_units(&self, index: i64) -> Result<Vec<i128>> {
        if index < self.min_index || index > self.max_index {
            return Err(FlowError::OutsidePath {
                index,
                min: self.min_index,
                max: self.max_index,
            });
        }
        let mut acc = vec![0i128; self.d];
        let (lo, hi, sign) = if index >= 0 { (0, index, 1) } else { (index, 0, -1) };
        for j in lo..hi {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += sign * i128::from(self.units_at(self.level, j, c));
            }
        }
        Ok(acc)
    }

    pub fn value(&self, index: i64) -> Result<Vec<f64>> {
        Ok(self
            .value_units(index)?
            .into_iter()
            .map(|u| u as f64 * QUANTUM)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_arguments() {
        let a = NoisePath::new(7, 3, 2, 1e-3, -50, 50).unwrap();
        let b = NoisePath::new(7, 3, 2, 1e-3, -50, 50).unwrap();
        for i in -50..50 {
            assert_eq!(a.increment(i).unwrap(), b.increment(i).unwrap());
        }
        let c = NoisePath::new(8, 3, 2, 1e-3, -50, 50).unwrap();
        assert_ne!(a.increment(0).unwrap(), c.increment(0).unwrap());
    }

    #[test]
    fn values_are_anchored_partial_sums() {
        let p = NoisePath::new(1, 0, 3, 0.01, -20, 20).unwrap();
        assert_eq!(p.value(0).unwrap(), vec![0.0; 3]);
        for i in -20..20 {
            let (v0, v1) = (p.value_units(i).unwrap(), p.value_units(i + 1).unwrap());
            let inc = p.increment_units(i).unwrap();
            for c in 0..3 {
                assert_eq!(v1[c] - v0[c], i128::from(inc[c]));
            }
        }
        let back = p.value(-1).unwrap();
        let inc = p.increment(-1).unwrap();
        for c in 0..3 {
            assert_eq!(back[c], -inc[c]);
        }
    }

    #[test]
    fn range_is_checked() {
        let p = NoisePath::new(1, 0, 1, 0.1, 0, 10).unwrap();
        assert!(p.increment(10).is_err());
        assert!(p.increment(-1).is_err());
        assert!(p.value(10).is_ok());
        assert!(NoisePath::new(1, 0, 1, 0.0, 0, 10).is_err());
        assert!(NoisePath::new(1, 0, 1, 0.1, 3, 3).is_err());
    }

    #[test]
    fn extension_preserves_issued_increments() {
        let p = NoisePath::new(5, 2, 2, 0.01, 0, 100).unwrap();
        let q = p.extend(-1000, 100);
        for i in 0..100 {
            assert_eq!(p.increment(i).unwrap(), q.increment(i).unwrap());
        }
        assert!(q.increment(-1000).is_ok());
    }

    #[test]
    fn refined_pairs_sum_to_coarse_increment() {
        let p = NoisePath::new(9, 1, 2, 0.02, -30, 30).unwrap();
        let f = p.refine().unwrap();
        let ff = f.refine().unwrap();
        assert_eq!(f.dt(), 0.01);
        for i in -30..30 {
            let c = p.increment_units(i).unwrap();
            let (a, b) = (f.increment_units(2 * i).unwrap(), f.increment_units(2 * i + 1).unwrap());
            let quad: Vec<Vec<i64>> = (0..4).map(|k| ff.increment_units(4 * i + k).unwrap()).collect();
            for comp in 0..2 {
                assert_eq!(a[comp] + b[comp], c[comp]);
                assert_eq!(quad.iter().map(|q| q[comp]).sum::<i64>(), c[comp]);
            }
            // float view is exact as well
            let (cf, af, bf) = (p.increment(i).unwrap(), f.increment(2 * i).unwrap(), f.increment(2 * i + 1).unwrap());
            assert_eq!(af[0] + bf[0], cf[0]);
        }
        // values agree on the shared grid
        assert_eq!(p.value(7).unwrap(), f.value(14).unwrap());
    }

    #[test]
    fn refinement_depth_limited() {
        let p = NoisePath::new(0, 0, 1, 1.0, 0, 4).unwrap().with_max_level(1);
        let f = p.refine().unwrap();
        assert!(matches!(f.refine(), Err(FlowError::RefinementDepth { level: 2, max: 1 })));
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn increment_variance_matches_dt() {
        let dt = 0.004;
        let n = 1_000_000;
        let p = NoisePath::new(2024, 0, 1, dt, 0, n).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| p.increment(i).unwrap()[0]).collect();
        let (m, v) = mean_var(&xs);
        // var of the sample variance for a Gaussian: 2σ⁴/(n−1)
        let se = (2.0 / (n as f64 - 1.0)).sqrt() * dt;
        assert!((v - dt).abs() < 3.0 * se, "variance {v} vs {dt}");
        assert!(m.abs() < 4.0 * (dt / n as f64).sqrt());
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 1_000_000;
        let a = NoisePath::new(77, 0, 1, 1.0, 0, n).unwrap();
        let b = NoisePath::new(77, 1, 1, 1.0, 0, n).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| a.increment(i).unwrap()[0]).collect();
        let ys: Vec<f64> = (0..n).map(|i| b.increment(i).unwrap()[0]).collect();
        let (mx, vx) = mean_var(&xs);
        let (my, vy) = mean_var(&ys);
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n as f64 - 1.0);
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "correlation {r}");
    }

    #[test]
    fn bridge_midpoint_variance() {
        let dt = 0.01;
        let n = 1_000_000i64;
        let p = NoisePath::new(31, 4, 1, dt, 0, n).unwrap();
        let f = p.refine().unwrap();
        let dev: Vec<f64> = (0..n)
            .map(|i| f.increment(2 * i).unwrap()[0] - 0.5 * p.increment(i).unwrap()[0])
            .collect();
        let (_, v) = mean_var(&dev);
        let target = dt / 4.0;
        let se = (2.0 / (n as f64 - 1.0)).sqrt() * target;
        assert!((v - target).abs() < 3.0 * se, "bridge variance {v} vs {target}");
    }
}

//! Flat torus geometry: wrapping, lattice-minimal distance, and lifted points.

use serde::{Deserialize, Serialize};

/// Wraps a coordinate into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let w = x - x.floor();
    // x - floor(x) can round up to 1.0 for tiny negative x
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Signed minimal-image difference `b - a` per coordinate, each in `[-1/2, 1/2]`.
#[inline]
pub fn min_image(a: f64, b: f64) -> f64 {
    let d = b - a;
    d - d.round()
}

/// Flat-torus distance: minimum over lattice translates of the Euclidean distance.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = min_image(x, y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Largest possible distance on `T^N`.
pub fn diameter(dim: usize) -> f64 {
    0.5 * (dim as f64).sqrt()
}

/// A point of the torus together with its lift to the universal cover.
///
/// `lift - torus` is an integer vector at all times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedPoint {
    pub torus: Vec<f64>,
    pub lift: Vec<f64>,
}

impl LiftedPoint {
    /// Starts a lift at the given torus coordinates (lift equals the wrapped point).
    pub fn at(x: &[f64]) -> Self {
        let torus: Vec<f64> = x.iter().map(|&v| wrap(v)).collect();
        Self {
            lift: torus.clone(),
            torus,
        }
    }

    /// Builds from an arbitrary lift; torus coordinates are its wrap.
    pub fn from_lift(lift: Vec<f64>) -> Self {
        let torus = lift.iter().map(|&v| wrap(v)).collect();
        Self { torus, lift }
    }

    pub fn dim(&self) -> usize {
        self.torus.len()
    }

    /// Re-derives torus coordinates after the lift moved.
    pub fn rewrap(&mut self) {
        for (t, &l) in self.torus.iter_mut().zip(&self.lift) {
            *t = wrap(l);
        }
    }

    /// Winding vector `lift - torus`; integer-valued by construction.
    pub fn winding(&self) -> Vec<f64> {
        self.lift.iter().zip(&self.torus).map(|(l, t)| l - t).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_into_unit_interval() {
        assert_eq!(wrap(1.25), 0.25);
        assert_eq!(wrap(-0.25), 0.75);
        assert_eq!(wrap(-1e-300), 0.0);
        assert_eq!(wrap(3.0), 0.0);
    }

    #[test]
    fn distance_uses_nearest_translate() {
        assert!((distance(&[0.05, 0.0], &[0.95, 0.0]) - 0.1).abs() < 1e-15);
        assert!((distance(&[0.0, 0.0], &[0.5, 0.5]) - diameter(2)).abs() < 1e-15);
    }

    #[test]
    fn winding_is_integral() {
        let p = LiftedPoint::from_lift(vec![-2.3, 7.9]);
        for w in p.winding() {
            assert_eq!(w, w.round());
        }
    }
}

//! Simulation and statistical verification for stochastic flows of
//! diffeomorphisms on the flat torus driven by finite-dimensional Brownian motion.

pub mod analysis;
pub mod dissipative;
pub mod error;
pub mod fields;
pub mod flow;
pub mod measures;
pub mod noise;
pub mod torus;
pub mod trig;

pub use error::{FlowError, Result};

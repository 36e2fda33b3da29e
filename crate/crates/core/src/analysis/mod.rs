//! Estimators that turn simulations into statistical checks: Lyapunov
//! exponents, stopping-time statistics, correlation decay, occupation of the
//! diagonal, normality of additive functionals and their diffusivity.

mod clt;
mod diagnostics;
mod lyapunov;
mod mixing;
mod occupation;
pub mod stats;
mod stopping;
mod transport;

pub use clt::{
    clt_measure, clt_npoint, estimate_da, normality_report, normality_report_vector, CltReport, DaEstimate,
    MeasureCltReport, NpointCltReport, VectorCltReport, KS_CRITICAL_1PCT, KURTOSIS_GATE, SKEWNESS_GATE, TIME_BLOCKS,
};
pub use diagnostics::{self_convergence, volume_defect, ConvergenceReport, VolumeReport, MIN_ORDER, MIN_ORDER_R2};
pub use lyapunov::{carverhill_check, carverhill_rate, lyapunov_spectrum, lyapunov_top, CarverhillCheck, LyapunovSpectrum};
pub use mixing::{correlation_decay, fit_correlation, separation_exponent, CorrelationCurve, SeparationFit};
pub use occupation::{
    diagonal_occupation, min_pairwise_distance, occupation_experiment, occupation_fraction, OccupationReport,
};
pub use stats::{fit_exponential, welch_anova, DecayFit, Estimate, LinearFit, Verdict, WelchTest};
pub use stopping::{
    escape_moment_slope, escape_times, exp_moment, EscapeMomentSlope, return_cycles, stopping_times, tail_fit, MomentEstimate, OpenInterval, StoppingRecord,
    StoppingTracker,
};
pub use transport::{energy_trend, equidistribution, EnergyReport, EquidistributionReport};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::Scheme;
use crate::noise::NoisePath;

/// Default fraction of the torus diameter used as the outer stopping radius.
pub const DEFAULT_RADIUS_FRACTION: f64 = 0.1;
/// Default grid unit for the discrete stopping times.
pub const DEFAULT_DELTA: f64 = 0.1;

/// Noise and discretization settings shared by the Monte Carlo estimators.
///
/// Realization `i` uses stream `stream_offset + i` of `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    pub seed: u64,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub stream_offset: u64,
}

impl PathParams {
    pub fn new(seed: u64, dt: f64) -> Self {
        Self {
            seed,
            dt,
            scheme: Scheme::Heun,
            stream_offset: 0,
        }
    }

    pub fn with_stream_offset(self, stream_offset: u64) -> Self {
        Self { stream_offset, ..self }
    }

    /// Path of realization `rep` covering `[t0, t1]`.
    pub fn path(&self, d: usize, rep: u64, t0: f64, t1: f64) -> Result<NoisePath> {
        NoisePath::covering(self.seed, self.stream_offset + rep, d, self.dt, t0, t1)
    }
}

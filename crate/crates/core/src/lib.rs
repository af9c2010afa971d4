//! Optimal unbiased minimum-variance linear filtering for linear stochastic
//! flows with mean-field interaction.
//!
//! The crate evaluates the error covariance of a linear filter driven by a
//! gain schedule, its directional (Gâteaux) derivative with respect to the
//! gain, and drives the gain to first-order stationarity. Every derivative
//! formula has an independent finite-difference or Monte Carlo counterpart.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! `*64` aliases below fix the scalar to `f64`.

pub mod covariance;
pub mod error;
pub mod export;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod optimal_gain;
pub mod presets;
pub mod real;
pub mod simulation;
pub mod validation;

pub use covariance::{CovarianceField, GradientField};
pub use error::{Error, Result};
pub use kernels::{GainSchedule, KernelBundle};
pub use model::{BarQuantities, InitialMeasure, RawCoefficients, Scenario};
pub use numerics::{TimeGrid, TriangularKernel};
pub use optimal_gain::{OptimizationReport, OptimizerOptions, RiccatiSolution};
pub use real::Real;
pub use simulation::{PathEnsemble, SimulationOptions};

/// Which closed form to use for formulas whose published transcription
/// disagrees with the independent oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Formula {
    /// The published closed form, transcribed term by term.
    Published,
    /// The form re-derived from the error representation; this is what the
    /// library uses by default.
    Corrected,
}

impl std::fmt::Display for Formula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Formula::Published => f.write_str("published"),
            Formula::Corrected => f.write_str("corrected"),
        }
    }
}

pub type TimeGrid64 = TimeGrid<f64>;
pub type Scenario64 = Scenario<f64>;
pub type InitialMeasure64 = InitialMeasure<f64>;
pub type GainSchedule64 = GainSchedule<f64>;
pub type KernelBundle64 = KernelBundle<f64>;
pub type PathEnsemble64 = PathEnsemble<f64>;
pub type OptimizationReport64 = OptimizationReport<f64>;
pub type CovarianceField64 = CovarianceField<f64>;

pub type TimeGrid32 = TimeGrid<f32>;
pub type Scenario32 = Scenario<f32>;
pub type GainSchedule32 = GainSchedule<f32>;

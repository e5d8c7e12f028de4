//! Numerical laboratory for one-dimensional conservative spin systems.
//!
//! The objects here all revolve around a single-site potential `V = phi + psi`
//! (uniformly convex part plus bounded smooth perturbation) and the product
//! measure `exp(-sum V(eta_i))` conditioned on the empirical mean
//! `sum eta_i = rho N`:
//!
//! * [`potential`] - potential families and class certification,
//! * [`single_site`] - the tilted single-site law with zero mean and its
//!   moments, tail and characteristic-function diagnostics,
//! * [`edgeworth`] - n-fold convolutions of the tilted law, local CLT
//!   corrections, canonical one- and two-site marginals,
//! * [`kop`] - the two-site conditional-expectation operator and its
//!   spectral confinement,
//! * [`gap`] - Poincare constants of the conditioned measure: exact slice
//!   eigensolves for small N, algebraic variance decompositions, recursion
//!   diagnostics and MCMC Rayleigh-quotient bounds,
//! * [`gl`] - lattice gradient dynamics: staircase paths, congestion
//!   constants and the comparison between lattice and mean-field gaps,
//! * [`sampler`] - a conservative pair heat-bath chain.

pub mod edgeworth;
pub mod gap;
pub mod gl;
pub mod grid;
pub mod kop;
pub mod numerics;
pub mod potential;
pub mod sampler;
pub mod single_site;

pub use potential::Potential;
pub use single_site::TiltedMeasure;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum SpinGapError {
    #[error("chemical potential bracket failed for rho = {rho}: mean({lo:.6e}) = {mean_lo:.3e}, mean({hi:.6e}) = {mean_hi:.3e}")]
    BracketFailure {
        rho: f64,
        lo: f64,
        hi: f64,
        mean_lo: f64,
        mean_hi: f64,
    },

    #[error("quadrature mass check failed: estimated truncated tail {tail:.3e} exceeds {limit:.3e}")]
    MassCheck { tail: f64, limit: f64 },

    #[error("convolution renormalization drift {drift:.3e} exceeds {limit:.3e} at stage {stage}")]
    ConvolutionDrift {
        stage: String,
        drift: f64,
        limit: f64,
    },

    #[error("density underflow: {0}")]
    Underflow(String),

    #[error("self-check failed: {what} moved by {moved:.3e} (limit {limit:.3e})")]
    SelfCheck {
        what: String,
        moved: f64,
        limit: f64,
    },

    #[error("cross-check failed: {what} deviates by {dev:.3e} (limit {limit:.3e})")]
    CrossCheck {
        what: String,
        dev: f64,
        limit: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpinGapError>;

//! Semi-closed-form pricing engine for Up-and-Out barrier and American
//! call options on a stock following a time-dependent Ornstein-Uhlenbeck
//! process dS = [r(t) - q(t)] S dt + sigma(t) dW.
//!
//! The pricing PDE is reduced to the heat equation through a Riccati-based
//! change of variables, the boundary flux (or free exercise boundary) is
//! recovered from a first-kind Fredholm equation, and prices are assembled
//! from one-dimensional integrals of Jacobi theta-function kernels. An
//! independent Crank-Nicolson finite-difference solver provides the
//! cross-check oracle.

pub mod error;
pub mod fd;
pub mod fredholm;
pub mod pricer;
pub mod quad;
pub mod termstructure;
pub mod theta;
pub mod transform;

pub use error::{PricingError, Result};
pub use termstructure::{CoefficientCurve, CoefficientValues, ExponentialParams, Integrand};
pub use transform::{MovingBoundary, RiccatiInit, TransformBundle, TransformMode};

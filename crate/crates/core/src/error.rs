//! Error types shared across the pricing engine.

use std::fmt;

/// Errors returned by curve evaluation, transforms, solvers and pricers.
#[derive(Debug, Clone, PartialEq)]
pub enum PricingError {
    /// A time or state query fell outside the valid domain.
    OutOfDomain { what: &'static str, value: f64, min: f64, max: f64 },
    /// Invalid construction or call parameters.
    InvalidParameter(String),
    /// Adaptive quadrature failed to reach the requested tolerance.
    QuadratureFailure { detail: String },
    /// The Riccati solution left the trusted range before the horizon.
    BlowUp { time: f64, value: f64 },
    /// Jacobi theta nome outside [0, 1).
    InvalidNome(f64),
    /// The payoff region [K1, y(0)] is empty; the barrier price is zero.
    EmptyPayoffRegion { k1: f64, y0: f64 },
    /// A log-domain guard detected an exponent outside the f64 range.
    Overflow { detail: String },
    /// The regularized normal equations are numerically rank zero.
    SingularSystem,
    /// An iterative solve stopped at max_iter; carries the best residual.
    NoConvergence { residual: f64, iterations: usize },
    /// The exercise boundary left the numerical domain cap (no early
    /// exercise region; callers fall back to the European price).
    BoundaryDiverged { at_tau: f64 },
    /// Spot at or above the barrier: the option is already knocked out.
    BarrierBreached { spot: f64, barrier: f64 },
    /// A finite-difference solve produced values outside the stable range.
    InstabilityDetected { detail: String },
}

impl fmt::Display for PricingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PricingError::OutOfDomain { what, value, min, max } => {
                write!(f, "{what} = {value} outside [{min}, {max}]")
            }
            PricingError::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            PricingError::QuadratureFailure { detail } => {
                write!(f, "quadrature failed to converge: {detail}")
            }
            PricingError::BlowUp { time, value } => {
                write!(f, "Riccati blow-up at t = {time} (|w| = {value:.3e})")
            }
            PricingError::InvalidNome(w) => write!(f, "theta nome {w} outside [0, 1)"),
            PricingError::EmptyPayoffRegion { k1, y0 } => {
                write!(f, "mapped strike {k1} >= initial boundary {y0}: empty payoff region")
            }
            PricingError::Overflow { detail } => write!(f, "numerical overflow: {detail}"),
            PricingError::SingularSystem => write!(f, "regularized system is numerically singular"),
            PricingError::NoConvergence { residual, iterations } => {
                write!(f, "no convergence after {iterations} iterations (residual {residual:.3e})")
            }
            PricingError::BoundaryDiverged { at_tau } => {
                write!(f, "exercise boundary exceeded the domain cap at tau = {at_tau}")
            }
            PricingError::BarrierBreached { spot, barrier } => {
                write!(f, "spot {spot} at or above barrier {barrier}")
            }
            PricingError::InstabilityDetected { detail } => {
                write!(f, "finite-difference instability: {detail}")
            }
        }
    }
}

impl std::error::Error for PricingError {}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PricingError>;

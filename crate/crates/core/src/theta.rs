//! Jacobi theta function theta3 and the difference kernels used by the
//! heat-equation reconstruction.
//!
//! theta3(z, w) = 1 + 2 sum_{n>=1} w^{n^2} cos(2nz) for 0 <= w < 1. For
//! nomes near 1 the series is summed in its modular (imaginary
//! transformation) form: with w = e^{-pi t},
//!
//!   theta3(z, w) = (1/sqrt(t)) sum_k exp(-(z - pi k)^2 / (pi t)),
//!
//! a rapidly converging sum of Gaussians. The crossover is at w = 1/2,
//! where both representations need only a handful of terms.

use crate::error::{PricingError, Result};
use statrs::function::erf::erf;

/// Default truncation tolerance for the theta series.
pub const DEFAULT_TOL: f64 = 1e-14;

const SERIES_SWITCH: f64 = 0.5;
// exp(-42) ~ 6e-19: below double rounding for O(1) sums
const LOG_CUTOFF: f64 = 42.0;

fn check_nome(omega: f64) -> Result<()> {
    if !(0.0..1.0).contains(&omega) || !omega.is_finite() {
        return Err(PricingError::InvalidNome(omega));
    }
    Ok(())
}

/// theta3(z, omega) truncated once 2 omega^{n^2} drops below `tol`.
pub fn theta3(z: f64, omega: f64, tol: f64) -> Result<f64> {
    check_nome(omega)?;
    if omega == 0.0 {
        return Ok(1.0);
    }
    if omega < SERIES_SWITCH {
        let mut sum = 1.0;
        let mut pow = omega; // omega^{n^2}
        let mut step = omega * omega * omega; // omega^{2n+1}
        let omega2 = omega * omega;
        let mut n = 1.0;
        while 2.0 * pow >= tol {
            sum += 2.0 * pow * (2.0 * n * z).cos();
            pow *= step;
            step *= omega2;
            n += 1.0;
        }
        Ok(sum)
    } else {
        // modular form: t = -ln(omega)/pi, sum of Gaussians
        let t = -omega.ln() / std::f64::consts::PI;
        let pi_t = std::f64::consts::PI * t;
        let radius = (pi_t * LOG_CUTOFF).sqrt();
        let k_lo = ((z - radius) / std::f64::consts::PI).floor() as i64;
        let k_hi = ((z + radius) / std::f64::consts::PI).ceil() as i64;
        let mut sum = 0.0;
        for k in k_lo..=k_hi {
            let d = z - std::f64::consts::PI * k as f64;
            sum += (-d * d / pi_t).exp();
        }
        Ok(sum / t.sqrt())
    }
}

/// Partial sum of the theta3 series with exactly `n_terms` cosine terms.
pub fn theta3_partial(z: f64, omega: f64, n_terms: usize) -> Result<f64> {
    check_nome(omega)?;
    let mut sum = 1.0;
    let mut pow = omega;
    let mut step = omega * omega * omega;
    let omega2 = omega * omega;
    for n in 1..=n_terms {
        sum += 2.0 * pow * (2.0 * n as f64 * z).cos();
        pow *= step;
        step *= omega2;
    }
    Ok(sum)
}

/// The boundary-respecting kernel theta3(phi_-(z)) - theta3(phi_+(z)) with
/// phi_-+(z) = pi (x -+ z) / (2 y). Evaluated in the equivalent sine form
///
///   4 sum_{n>=1} omega^{n^2} sin(n pi x / y) sin(n pi z / y),
///
/// which is free of the cancellation between the two theta values; the
/// modular branch uses mirrored Gaussian images so the zeros at x = 0 and
/// x = y are exact.
pub fn theta_diff(x: f64, z: f64, y_tau: f64, omega: f64) -> Result<f64> {
    Ok(ThetaDiffKernel::new(y_tau, omega)?.diff(x, z))
}

/// Precomputed state for repeated `theta_diff` evaluations at one nome.
#[derive(Debug, Clone)]
pub struct ThetaDiffKernel {
    y: f64,
    branch: Branch,
}

#[derive(Debug, Clone)]
enum Branch {
    /// omega^{n^2} for n = 1..=N
    Series(Vec<f64>),
    /// four_delta = 4 Delta in heat time, prefactor y / sqrt(pi Delta)
    Dual { four_delta: f64, prefactor: f64, radius: f64 },
}

impl ThetaDiffKernel {
    pub fn new(y: f64, omega: f64) -> Result<Self> {
        check_nome(omega)?;
        if !(y > 0.0) {
            return Err(PricingError::InvalidParameter(format!(
                "boundary level must be positive, got {y}"
            )));
        }
        if omega < SERIES_SWITCH {
            let mut powers = Vec::new();
            if omega > 0.0 {
                let mut pow = omega;
                let mut step = omega * omega * omega;
                let omega2 = omega * omega;
                while pow >= 1e-18 {
                    powers.push(pow);
                    pow *= step;
                    step *= omega2;
                }
            }
            Ok(Self { y, branch: Branch::Series(powers) })
        } else {
            // omega = exp(-(pi/y)^2 Delta) => Delta in heat-time units
            let delta = -omega.ln() * y * y / (std::f64::consts::PI * std::f64::consts::PI);
            let four_delta = 4.0 * delta;
            let prefactor = y / (std::f64::consts::PI * delta).sqrt();
            let radius = (four_delta * LOG_CUTOFF).sqrt();
            Ok(Self { y, branch: Branch::Dual { four_delta, prefactor, radius } })
        }
    }

    /// Construct directly from the heat-time gap Delta = tau - s.
    pub fn from_delta(y: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(PricingError::InvalidParameter(format!(
                "heat-time gap must be positive, got {delta}"
            )));
        }
        let omega = (-(std::f64::consts::PI / y).powi(2) * delta).exp();
        Self::new(y, omega)
    }

    pub fn diff(&self, x: f64, z: f64) -> f64 {
        if x == 0.0 || x == self.y {
            return 0.0;
        }
        match &self.branch {
            Branch::Series(powers) => {
                let cx = std::f64::consts::PI * x / self.y;
                let cz = std::f64::consts::PI * z / self.y;
                let mut sum = 0.0;
                for (i, p) in powers.iter().enumerate() {
                    let n = (i + 1) as f64;
                    sum += p * (n * cx).sin() * (n * cz).sin();
                }
                4.0 * sum
            }
            Branch::Dual { four_delta, prefactor, radius } => {
                prefactor
                    * (self.image_sum(x - z, *four_delta, *radius)
                        - self.image_sum(x + z, *four_delta, *radius))
            }
        }
    }

    /// d/dz of `diff`: 4 sum_n omega^{n^2} c_n sin(c_n x) cos(c_n z).
    pub fn diff_dz(&self, x: f64, z: f64) -> f64 {
        if x == 0.0 || x == self.y {
            return 0.0;
        }
        match &self.branch {
            Branch::Series(powers) => {
                let c = std::f64::consts::PI / self.y;
                let cx = c * x;
                let cz = c * z;
                let mut sum = 0.0;
                for (i, p) in powers.iter().enumerate() {
                    let n = (i + 1) as f64;
                    sum += p * n * c * (n * cx).sin() * (n * cz).cos();
                }
                4.0 * sum
            }
            Branch::Dual { four_delta, prefactor, radius } => {
                prefactor
                    * (-self.image_sum_d(x - z, *four_delta, *radius)
                        - self.image_sum_d(x + z, *four_delta, *radius))
            }
        }
    }

    fn image_sum(&self, u: f64, four_delta: f64, radius: f64) -> f64 {
        let two_y = 2.0 * self.y;
        let k_lo = ((u - radius) / two_y).floor() as i64;
        let k_hi = ((u + radius) / two_y).ceil() as i64;
        let mut sum = 0.0;
        for k in k_lo..=k_hi {
            let d = u - two_y * k as f64;
            sum += (-d * d / four_delta).exp();
        }
        sum
    }

    /// d/du of `image_sum`.
    fn image_sum_d(&self, u: f64, four_delta: f64, radius: f64) -> f64 {
        let two_y = 2.0 * self.y;
        let k_lo = ((u - radius) / two_y).floor() as i64;
        let k_hi = ((u + radius) / two_y).ceil() as i64;
        let mut sum = 0.0;
        for k in k_lo..=k_hi {
            let d = u - two_y * k as f64;
            sum += (-d * d / four_delta).exp() * (-2.0 * d / four_delta);
        }
        sum
    }
}

/// Integrated kernel sums appearing in the American reconstruction's
/// lifting source. With c_n = n pi / y and omega = exp(-c_1^2 Delta):
///
///   weighted_sine: sum_n omega^{n^2} sin(c_n u) / c_n
///   quad_diff:     sum_n omega^{n^2} [cos(c_n u1) - cos(c_n u2)] / c_n^2
///
/// Both have closed modular forms in terms of erf, used for omega >= 1/2.
#[derive(Debug, Clone)]
pub struct IntegratedKernel {
    y: f64,
    delta: f64,
    branch: Branch,
}

impl IntegratedKernel {
    pub fn from_delta(y: f64, delta: f64) -> Result<Self> {
        if !(y > 0.0) || !(delta > 0.0) {
            return Err(PricingError::InvalidParameter(
                "integrated kernel needs positive y and Delta".into(),
            ));
        }
        let omega = (-(std::f64::consts::PI / y).powi(2) * delta).exp();
        check_nome(omega)?;
        let kernel = ThetaDiffKernel::new(y, omega)?;
        Ok(Self { y, delta, branch: kernel.branch })
    }

    /// sum_n omega^{n^2} sin(c_n u) / c_n.
    pub fn weighted_sine(&self, u: f64) -> f64 {
        match &self.branch {
            Branch::Series(powers) => {
                let c = std::f64::consts::PI / self.y;
                let mut sum = 0.0;
                for (i, p) in powers.iter().enumerate() {
                    let n = (i + 1) as f64;
                    sum += p * (n * c * u).sin() / (n * c);
                }
                sum
            }
            Branch::Dual { .. } => {
                let c = 2.0 * self.delta.sqrt();
                let mut sum = -0.5 * u;
                for k in self.erf_window(u) {
                    let a = 2.0 * self.y * k as f64;
                    sum += 0.5 * self.y * (erf((u - a) / c) + erf(a / c));
                }
                sum
            }
        }
    }

    /// sum_n omega^{n^2} [cos(c_n u1) - cos(c_n u2)] / c_n^2
    /// = int_{u1}^{u2} weighted_sine(v) dv.
    pub fn quad_diff(&self, u1: f64, u2: f64) -> f64 {
        match &self.branch {
            Branch::Series(powers) => {
                let c = std::f64::consts::PI / self.y;
                let mut sum = 0.0;
                for (i, p) in powers.iter().enumerate() {
                    let n = (i + 1) as f64;
                    let cn = n * c;
                    sum += p * ((cn * u1).cos() - (cn * u2).cos()) / (cn * cn);
                }
                sum
            }
            Branch::Dual { .. } => self.antiderivative(u2) - self.antiderivative(u1),
        }
    }

    /// int_0^u weighted_sine(v) dv in the modular branch.
    fn antiderivative(&self, u: f64) -> f64 {
        let c = 2.0 * self.delta.sqrt();
        let mut sum = -0.25 * u * u;
        for k in self.erf_window(u) {
            let a = 2.0 * self.y * k as f64;
            let gauss = c / std::f64::consts::PI.sqrt();
            let i_erf = (u - a) * erf((u - a) / c) + gauss * (-((u - a) / c).powi(2)).exp()
                - a * erf(a / c)
                - gauss * (-(a / c).powi(2)).exp();
            sum += 0.5 * self.y * (i_erf + u * erf(a / c));
        }
        sum
    }

    fn erf_window(&self, u: f64) -> std::ops::RangeInclusive<i64> {
        // outside this window both erf terms are saturated and cancel
        let radius = 8.0 * self.delta.sqrt() + u.abs();
        let k_max = (radius / (2.0 * self.y)).ceil() as i64 + 1;
        -k_max..=k_max
    }
}

//! Deterministic model inputs: the short rate r(t), continuous dividend
//! yield q(t) and absolute (normal) volatility sigma(t), with their
//! derivatives and integrals.
//!
//! Volatility is stored in absolute currency units per sqrt(year). Callers
//! working from a lognormal quote multiply by a reference level before
//! constructing the curve.

use crate::error::{PricingError, Result};
use crate::quad::adaptive_gk;

/// Which integrand [`CoefficientCurve::integrate`] should use.
pub enum Integrand<'a> {
    /// Short rate r(t).
    Rate,
    /// Dividend yield q(t).
    Dividend,
    /// Squared volatility sigma^2(t).
    SigmaSquared,
    /// Arbitrary user integrand of time.
    Custom(&'a dyn Fn(f64) -> f64),
}

/// Coefficient values at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientValues {
    pub r: f64,
    pub q: f64,
    pub sigma: f64,
}

/// Time derivatives of the coefficients at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSlopes {
    pub dr: f64,
    pub dq: f64,
    pub dsigma: f64,
}

/// Parameters of the exponential coefficient family
/// r(t) = r0 e^{-r_k t}, q(t) = q0, sigma(t) = sigma0 e^{-sigma_k t}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialParams {
    pub r0: f64,
    pub q0: f64,
    pub sigma0: f64,
    pub r_k: f64,
    pub sigma_k: f64,
}

#[derive(Debug, Clone)]
enum Family {
    Exponential(ExponentialParams),
    PiecewiseConstant {
        times: Vec<f64>,
        r: Vec<f64>,
        q: Vec<f64>,
        sigma: Vec<f64>,
    },
    Sampled {
        r: Pchip,
        q: Pchip,
        sigma: Pchip,
    },
}

/// Immutable coefficient curve on [0, horizon].
#[derive(Debug, Clone)]
pub struct CoefficientCurve {
    family: Family,
    horizon: f64,
}

impl CoefficientCurve {
    /// Exponential family curve; `sigma0` is absolute volatility.
    pub fn exponential(params: ExponentialParams, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(PricingError::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(params.sigma0 > 0.0) {
            return Err(PricingError::InvalidParameter(format!(
                "sigma0 must be positive, got {}",
                params.sigma0
            )));
        }
        Ok(Self { family: Family::Exponential(params), horizon })
    }

    /// Piecewise-constant curve. `times` are strictly increasing segment
    /// starts beginning at 0; value i applies on [times[i], times[i+1]).
    pub fn piecewise_constant(
        times: Vec<f64>,
        r: Vec<f64>,
        q: Vec<f64>,
        sigma: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(PricingError::InvalidParameter("horizon must be positive".into()));
        }
        if times.is_empty() || times.len() != r.len() || times.len() != q.len() || times.len() != sigma.len() {
            return Err(PricingError::InvalidParameter(
                "piecewise curve needs equal, non-empty knot and value arrays".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(PricingError::InvalidParameter("first knot must be t = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PricingError::InvalidParameter("knot times must be strictly increasing".into()));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(PricingError::InvalidParameter("sigma must be positive on every segment".into()));
        }
        Ok(Self { family: Family::PiecewiseConstant { times, r, q, sigma }, horizon })
    }

    /// Sampled curve with monotone cubic (Fritsch-Carlson) interpolation.
    /// Samples must cover [0, horizon].
    pub fn sampled(
        times: Vec<f64>,
        r: Vec<f64>,
        q: Vec<f64>,
        sigma: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(PricingError::InvalidParameter("horizon must be positive".into()));
        }
        if times.len() < 2 {
            return Err(PricingError::InvalidParameter("sampled curve needs at least two knots".into()));
        }
        if times[0] != 0.0 || *times.last().unwrap() < horizon {
            return Err(PricingError::InvalidParameter(
                "sampled knots must start at 0 and cover the horizon".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PricingError::InvalidParameter("knot times must be strictly increasing".into()));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(PricingError::InvalidParameter("sigma samples must be positive".into()));
        }
        // Fritsch-Carlson interpolation does not overshoot the data, so
        // positive sigma samples give a positive interpolant.
        let r = Pchip::new(times.clone(), r)?;
        let q = Pchip::new(times.clone(), q)?;
        let sigma = Pchip::new(times, sigma)?;
        Ok(Self { family: Family::Sampled { r, q, sigma }, horizon })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// The same curve truncated to a shorter horizon (per-maturity use).
    pub fn restrict(&self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || horizon > self.horizon {
            return Err(PricingError::InvalidParameter(format!(
                "restricted horizon {horizon} outside (0, {}]",
                self.horizon
            )));
        }
        Ok(Self { family: self.family.clone(), horizon })
    }

    /// Exponential parameters when the curve belongs to that family.
    pub fn exponential_params(&self) -> Option<ExponentialParams> {
        match &self.family {
            Family::Exponential(p) => Some(*p),
            _ => None,
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(PricingError::OutOfDomain {
                what: "t",
                value: t,
                min: 0.0,
                max: self.horizon,
            });
        }
        Ok(())
    }

    /// Coefficient values (r, q, sigma) at time t in [0, horizon].
    pub fn eval(&self, t: f64) -> Result<CoefficientValues> {
        self.check_domain(t)?;
        Ok(match &self.family {
            Family::Exponential(p) => CoefficientValues {
                r: p.r0 * (-p.r_k * t).exp(),
                q: p.q0,
                sigma: p.sigma0 * (-p.sigma_k * t).exp(),
            },
            Family::PiecewiseConstant { times, r, q, sigma } => {
                let i = segment_index(times, t);
                CoefficientValues { r: r[i], q: q[i], sigma: sigma[i] }
            }
            Family::Sampled { r, q, sigma } => CoefficientValues {
                r: r.eval(t),
                q: q.eval(t),
                sigma: sigma.eval(t),
            },
        })
    }

    /// Time derivatives (r', q', sigma') at t. Piecewise-constant segments
    /// have zero slope between knots.
    pub fn eval_derivatives(&self, t: f64) -> Result<CoefficientSlopes> {
        self.check_domain(t)?;
        Ok(match &self.family {
            Family::Exponential(p) => CoefficientSlopes {
                dr: -p.r_k * p.r0 * (-p.r_k * t).exp(),
                dq: 0.0,
                dsigma: -p.sigma_k * p.sigma0 * (-p.sigma_k * t).exp(),
            },
            Family::PiecewiseConstant { .. } => CoefficientSlopes { dr: 0.0, dq: 0.0, dsigma: 0.0 },
            Family::Sampled { r, q, sigma } => CoefficientSlopes {
                dr: r.derivative(t),
                dq: q.derivative(t),
                dsigma: sigma.derivative(t),
            },
        })
    }

    /// Integral of the selected coefficient over [t0, t1].
    ///
    /// Closed forms for the exponential and piecewise-constant families,
    /// adaptive Gauss-Kronrod (relative tolerance 1e-10) otherwise.
    pub fn integrate(&self, which: Integrand<'_>, t0: f64, t1: f64) -> Result<f64> {
        self.check_domain(t0)?;
        self.check_domain(t1)?;
        if t1 < t0 {
            return Err(PricingError::InvalidParameter(format!(
                "integration bounds reversed: [{t0}, {t1}]"
            )));
        }
        match (&self.family, &which) {
            (_, Integrand::Custom(f)) => adaptive_gk(f, t0, t1, 1e-10),
            (Family::Exponential(p), Integrand::Rate) => Ok(exp_integral(p.r0, p.r_k, t0, t1)),
            (Family::Exponential(p), Integrand::Dividend) => Ok(p.q0 * (t1 - t0)),
            (Family::Exponential(p), Integrand::SigmaSquared) => {
                Ok(exp_integral(p.sigma0 * p.sigma0, 2.0 * p.sigma_k, t0, t1))
            }
            (Family::PiecewiseConstant { times, r, q, sigma }, _) => {
                let vals: &[f64] = match which {
                    Integrand::Rate => r,
                    Integrand::Dividend => q,
                    Integrand::SigmaSquared => sigma,
                    Integrand::Custom(_) => unreachable!(),
                };
                let square = matches!(which, Integrand::SigmaSquared);
                Ok(piecewise_integral(times, vals, square, t0, t1, self.horizon))
            }
            (Family::Sampled { .. }, _) => {
                let f = |t: f64| {
                    let v = self.eval(t).expect("domain already validated");
                    match which {
                        Integrand::Rate => v.r,
                        Integrand::Dividend => v.q,
                        Integrand::SigmaSquared => v.sigma * v.sigma,
                        Integrand::Custom(_) => unreachable!(),
                    }
                };
                adaptive_gk(&f, t0, t1, 1e-10)
            }
        }
    }

    /// Time averages (r_bar, q_bar, sigma_bar^2) over [0, T] with
    /// T sigma_bar^2 = int_0^T sigma^2.
    pub fn effective_constants(&self, t_end: f64) -> Result<(f64, f64, f64)> {
        let r_bar = self.integrate(Integrand::Rate, 0.0, t_end)? / t_end;
        let q_bar = self.integrate(Integrand::Dividend, 0.0, t_end)? / t_end;
        let var_bar = self.integrate(Integrand::SigmaSquared, 0.0, t_end)? / t_end;
        Ok((r_bar, q_bar, var_bar))
    }
}

/// int_{t0}^{t1} c e^{-k s} ds with the k -> 0 limit handled.
fn exp_integral(c: f64, k: f64, t0: f64, t1: f64) -> f64 {
    if k.abs() < 1e-12 {
        c * (t1 - t0)
    } else {
        c / k * ((-k * t0).exp() - (-k * t1).exp())
    }
}

fn segment_index(times: &[f64], t: f64) -> usize {
    match times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    }
}

fn piecewise_integral(times: &[f64], vals: &[f64], square: bool, t0: f64, t1: f64, horizon: f64) -> f64 {
    let n = times.len();
    let mut total = 0.0;
    for i in 0..n {
        let seg_lo = times[i];
        let seg_hi = if i + 1 < n { times[i + 1] } else { horizon.max(t1) };
        let lo = seg_lo.max(t0);
        let hi = seg_hi.min(t1);
        if hi > lo {
            let v = if square { vals[i] * vals[i] } else { vals[i] };
            total += v * (hi - lo);
        }
    }
    total
}

/// Monotone cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Debug, Clone)]
pub(crate) struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub(crate) fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(PricingError::InvalidParameter("pchip needs matching arrays, len >= 2".into()));
        }
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] <= 0.0 {
                    d[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            d[0] = endpoint_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = endpoint_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    pub(crate) fn eval(&self, t: f64) -> f64 {
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = t - self.x[i];
        let delta = (self.y[i + 1] - self.y[i]) / h;
        let c2 = (3.0 * delta - 2.0 * self.d[i] - self.d[i + 1]) / h;
        let c3 = (self.d[i] + self.d[i + 1] - 2.0 * delta) / (h * h);
        self.y[i] + s * (self.d[i] + s * (c2 + s * c3))
    }

    pub(crate) fn derivative(&self, t: f64) -> f64 {
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = t - self.x[i];
        let delta = (self.y[i + 1] - self.y[i]) / h;
        let c2 = (3.0 * delta - 2.0 * self.d[i] - self.d[i + 1]) / h;
        let c3 = (self.d[i] + self.d[i + 1] - 2.0 * delta) / (h * h);
        self.d[i] + s * (2.0 * c2 + 3.0 * s * c3)
    }
}

fn endpoint_slope(h0: f64, h1: f64, delta0: f64, delta1: f64) -> f64 {
    let mut d = ((2.0 * h0 + h1) * delta0 - h0 * delta1) / (h0 + h1);
    if d * delta0 <= 0.0 {
        d = 0.0;
    } else if delta0 * delta1 < 0.0 && d.abs() > 3.0 * delta0.abs() {
        d = 3.0 * delta0;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn table1_curve(horizon: f64) -> CoefficientCurve {
        CoefficientCurve::exponential(
            ExponentialParams { r0: 0.02, q0: 0.01, sigma0: 45.0, r_k: 0.1, sigma_k: 0.2 },
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn exponential_values_at_zero() {
        let c = table1_curve(1.0);
        let v = c.eval(0.0).unwrap();
        assert_eq!((v.r, v.q, v.sigma), (0.02, 0.01, 45.0));
    }

    #[test]
    fn exponential_decay_at_long_horizon() {
        let c = table1_curve(10.0);
        let v = c.eval(10.0).unwrap();
        assert_relative_eq!(v.r, 0.02 * (-1.0f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(v.r, 0.0073576, max_relative = 1e-4);
    }

    #[test]
    fn piecewise_single_segment_is_constant() {
        let c = CoefficientCurve::piecewise_constant(
            vec![0.0],
            vec![0.03],
            vec![0.0],
            vec![40.0],
            2.0,
        )
        .unwrap();
        for &t in &[0.0, 0.7, 2.0] {
            let v = c.eval(t).unwrap();
            assert_eq!((v.r, v.q, v.sigma), (0.03, 0.0, 40.0));
        }
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let c = table1_curve(1.0);
        assert!(matches!(c.eval(-0.1), Err(PricingError::OutOfDomain { .. })));
        assert!(matches!(c.eval(1.2), Err(PricingError::OutOfDomain { .. })));
        assert!(c.eval(1.0).is_ok());
    }

    #[test]
    fn rate_integral_closed_form() {
        let c = table1_curve(1.0);
        let v = c.integrate(Integrand::Rate, 0.0, 1.0).unwrap();
        let expected = 0.02 / 0.1 * (1.0 - (-0.1f64).exp());
        assert_relative_eq!(v, expected, max_relative = 1e-14);
        assert_relative_eq!(v, 0.01903252, max_relative = 1e-6);
    }

    #[test]
    fn sigma_sq_integral_matches_effective_constant() {
        let c = table1_curve(1.0);
        let total = c.integrate(Integrand::SigmaSquared, 0.0, 1.0).unwrap();
        let (_, _, var_bar) = c.effective_constants(1.0).unwrap();
        assert_relative_eq!(total, var_bar * 1.0, max_relative = 1e-14);
    }

    #[test]
    fn piecewise_dividend_integral() {
        let c = CoefficientCurve::piecewise_constant(
            vec![0.0, 0.5],
            vec![0.02, 0.02],
            vec![0.01, 0.03],
            vec![40.0, 40.0],
            1.0,
        )
        .unwrap();
        let v = c.integrate(Integrand::Dividend, 0.0, 0.5).unwrap();
        assert_relative_eq!(v, 0.005, max_relative = 1e-14);
        let whole = c.integrate(Integrand::Dividend, 0.0, 1.0).unwrap();
        assert_relative_eq!(whole, 0.005 + 0.015, max_relative = 1e-14);
    }

    #[test]
    fn integral_additivity() {
        let c = table1_curve(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut ts: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let whole = c.integrate(Integrand::SigmaSquared, ts[0], ts[2]).unwrap();
            let split = c.integrate(Integrand::SigmaSquared, ts[0], ts[1]).unwrap()
                + c.integrate(Integrand::SigmaSquared, ts[1], ts[2]).unwrap();
            assert_relative_eq!(whole, split, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn analytic_vs_quadrature_paths() {
        let c = table1_curve(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = rng.gen_range(0.0..2.0);
            let b = rng.gen_range(a..2.0);
            let analytic = c.integrate(Integrand::Rate, a, b).unwrap();
            let f = |t: f64| c.eval(t).unwrap().r;
            let numeric = c.integrate(Integrand::Custom(&f), a, b).unwrap();
            assert_relative_eq!(analytic, numeric, max_relative = 1e-9, epsilon = 1e-13);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let c = table1_curve(1.0);
        let s = CoefficientCurve::sampled(
            (0..=20).map(|i| i as f64 * 0.05).collect(),
            (0..=20).map(|i| 0.02 * (-0.1 * i as f64 * 0.05).exp()).collect(),
            vec![0.01; 21],
            (0..=20).map(|i| 45.0 * (-0.2 * i as f64 * 0.05).exp()).collect(),
            1.0,
        )
        .unwrap();
        let h = 1e-6;
        for curve in [&c, &s] {
            for &t in &[0.13, 0.4, 0.62, 0.88] {
                let d = curve.eval_derivatives(t).unwrap();
                let up = curve.eval(t + h).unwrap();
                let dn = curve.eval(t - h).unwrap();
                assert_relative_eq!(d.dr, (up.r - dn.r) / (2.0 * h), max_relative = 1e-5);
                assert_relative_eq!(
                    d.dsigma,
                    (up.sigma - dn.sigma) / (2.0 * h),
                    max_relative = 1e-5
                );
            }
        }
    }

    #[test]
    fn sampled_tracks_exponential_family() {
        let c = table1_curve(1.0);
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
        let s = CoefficientCurve::sampled(
            times.clone(),
            times.iter().map(|t| 0.02 * (-0.1 * t).exp()).collect(),
            vec![0.01; times.len()],
            times.iter().map(|t| 45.0 * (-0.2 * t).exp()).collect(),
            1.0,
        )
        .unwrap();
        for &t in &[0.11, 0.33, 0.77, 0.99] {
            let a = c.eval(t).unwrap();
            let b = s.eval(t).unwrap();
            assert_relative_eq!(a.sigma, b.sigma, max_relative = 1e-6);
            assert_relative_eq!(a.r, b.r, max_relative = 1e-6);
        }
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let bad = CoefficientCurve::piecewise_constant(
            vec![0.0],
            vec![0.02],
            vec![0.0],
            vec![0.0],
            1.0,
        );
        assert!(matches!(bad, Err(PricingError::InvalidParameter(_))));
    }
}

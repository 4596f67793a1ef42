//! Reduction of the pricing PDE to the heat equation: Riccati solve for
//! w(t), the growth factor g(t) = exp(int_0^t w), the exponent pieces
//! k(t) and a(t), the heat-time change tau(t) with its inverse, and the
//! moving boundary y(tau) = H g(t(tau)).

use crate::error::{PricingError, Result};
use crate::quad::{cumulative_uniform, gk15_value};
use crate::termstructure::{CoefficientCurve, Integrand};
use std::io::Write;

/// Default number of nodes on the uniform time grid.
pub const DEFAULT_GRID: usize = 2001;

const BLOWUP_LIMIT: f64 = 1e6;

/// How the transform's w(t) was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformMode {
    /// Adaptive Runge-Kutta solve of the Riccati equation.
    RiccatiNumeric,
    /// Small-drift approximation with integration constant D.
    SmallDriftApprox(f64),
    /// Closed form for the exponential coefficient family.
    ClosedFormExponential,
}

/// Initial condition for the Riccati solve. The default q(0) - r(0)
/// reproduces the exponential family's exact solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiccatiInit {
    QMinusR,
    Value(f64),
}

/// w(t) from the small-drift approximation plus validity diagnostics.
#[derive(Debug, Clone)]
pub struct SmallDriftW {
    pub w: Vec<f64>,
    /// Non-fatal diagnostics where sigma^2(t) < 10 |D (r - q)|.
    pub validity_warnings: Vec<String>,
}

/// Everything the pricing stages need from the change of variables,
/// precomputed on a dense uniform time grid. Immutable once built.
#[derive(Debug, Clone)]
pub struct TransformBundle {
    curve: CoefficientCurve,
    t_grid: Vec<f64>,
    h: f64,
    w: Vec<f64>,
    g: Vec<f64>,
    k: Vec<f64>,
    a: Vec<f64>,
    tau: Vec<f64>,
    mode: TransformMode,
}

/// The barrier location in heat coordinates, sampled on a tau grid
/// increasing from 0 (maturity) to tau(0) (valuation time).
#[derive(Debug, Clone)]
pub struct MovingBoundary {
    pub tau_grid: Vec<f64>,
    pub y: Vec<f64>,
    /// Calendar times t(tau_j) matching `tau_grid`.
    pub t_of_tau: Vec<f64>,
}

/// Right-hand side w' = b(t) + w^2 + 2 w sigma'/sigma.
fn riccati_rhs(curve: &CoefficientCurve, t: f64, w: f64) -> f64 {
    let v = curve.eval(t).expect("grid time inside domain");
    let d = curve.eval_derivatives(t).expect("grid time inside domain");
    let drift = v.r - v.q;
    let sig_ratio = d.dsigma / v.sigma;
    let b = 2.0 * drift * sig_ratio - (drift * drift + d.dr - d.dq);
    b + w * w + 2.0 * w * sig_ratio
}

/// Solve the Riccati equation on a uniform grid with `n_grid` nodes using
/// an adaptive Dormand-Prince 5(4) integrator (local tolerance well below
/// the 1e-10 per-step target).
pub fn solve_riccati(curve: &CoefficientCurve, n_grid: usize, init: RiccatiInit) -> Result<Vec<f64>> {
    let n = checked_grid(n_grid)?;
    let t_end = curve.horizon();
    let h_grid = t_end / (n - 1) as f64;
    let w0 = match init {
        RiccatiInit::QMinusR => {
            let v = curve.eval(0.0)?;
            v.q - v.r
        }
        RiccatiInit::Value(v) => v,
    };

    let mut w = Vec::with_capacity(n);
    w.push(w0);
    let mut y = w0;
    let mut h_try = h_grid;
    for i in 1..n {
        let target = i as f64 * h_grid;
        let mut t = (i - 1) as f64 * h_grid;
        while t < target {
            let h = h_try.min(target - t);
            let (y_new, err) = dopri5_step(curve, t, y, h);
            let scale = 1e-14 + 1e-12 * y.abs().max(y_new.abs());
            let ratio = err / scale;
            if ratio <= 1.0 {
                t += h;
                y = y_new;
                if y.abs() > BLOWUP_LIMIT {
                    return Err(PricingError::BlowUp { time: t, value: y.abs() });
                }
                h_try = h * (0.9 * ratio.powf(-0.2)).clamp(1.0, 5.0);
            } else {
                h_try = h * (0.9 * ratio.powf(-0.2)).clamp(0.2, 0.9);
            }
        }
        w.push(y);
    }
    Ok(w)
}

/// One Dormand-Prince 5(4) step; returns (y_next, error_estimate).
fn dopri5_step(curve: &CoefficientCurve, t: f64, y: f64, h: f64) -> (f64, f64) {
    let f = |tt: f64, yy: f64| riccati_rhs(curve, tt.min(curve.horizon()), yy);
    let k1 = f(t, y);
    let k2 = f(t + h / 5.0, y + h * k1 / 5.0);
    let k3 = f(t + 3.0 * h / 10.0, y + h * (3.0 * k1 + 9.0 * k2) / 40.0);
    let k4 = f(t + 4.0 * h / 5.0, y + h * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3));
    let k5 = f(
        t + 8.0 * h / 9.0,
        y + h * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 + 64448.0 / 6561.0 * k3
            - 212.0 / 729.0 * k4),
    );
    let k6 = f(
        t + h,
        y + h * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 + 46732.0 / 5247.0 * k3
            + 49.0 / 176.0 * k4
            - 5103.0 / 18656.0 * k5),
    );
    let y5 = y
        + h * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4
            - 2187.0 / 6784.0 * k5
            + 11.0 / 84.0 * k6);
    let k7 = f(t + h, y5);
    let y4 = y
        + h * (5179.0 / 57600.0 * k1 + 7571.0 / 16695.0 * k3 + 393.0 / 640.0 * k4
            - 92097.0 / 339200.0 * k5
            + 187.0 / 2100.0 * k6
            + k7 / 40.0);
    (y5, (y5 - y4).abs())
}

/// Small-drift closed form w(t) = sigma^2(t) / (D - int_0^t sigma^2).
pub fn small_drift_w(curve: &CoefficientCurve, n_grid: usize, d: f64) -> Result<SmallDriftW> {
    let n = checked_grid(n_grid)?;
    let t_end = curve.horizon();
    let total_var = curve.integrate(Integrand::SigmaSquared, 0.0, t_end)?;
    if d <= total_var {
        return Err(PricingError::InvalidParameter(format!(
            "D = {d} must exceed int_0^T sigma^2 = {total_var}"
        )));
    }
    let h = t_end / (n - 1) as f64;
    let mut w = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    let mut cum = 0.0;
    for i in 0..n {
        let t = i as f64 * h;
        if i > 0 {
            cum += curve.integrate(Integrand::SigmaSquared, (i - 1) as f64 * h, t)?;
        }
        let v = curve.eval(t)?;
        let var = v.sigma * v.sigma;
        w.push(var / (d - cum));
        if var < 10.0 * (d * (v.r - v.q)).abs() && warnings.len() < 8 {
            warnings.push(format!(
                "small-drift validity weak at t = {t:.4}: sigma^2 = {var:.4e} < 10|D(r-q)| = {:.4e}",
                10.0 * (d * (v.r - v.q)).abs()
            ));
        }
    }
    Ok(SmallDriftW { w, validity_warnings: warnings })
}

impl TransformBundle {
    /// Solve the Riccati equation and assemble the bundle.
    pub fn with_riccati(curve: &CoefficientCurve, n_grid: usize, init: RiccatiInit) -> Result<Self> {
        let w = solve_riccati(curve, n_grid, init)?;
        Self::from_w_grid(curve, w, TransformMode::RiccatiNumeric)
    }

    /// Assemble the bundle from the small-drift w; also returns validity
    /// diagnostics.
    pub fn with_small_drift(
        curve: &CoefficientCurve,
        n_grid: usize,
        d: f64,
    ) -> Result<(Self, Vec<String>)> {
        let sd = small_drift_w(curve, n_grid, d)?;
        let bundle = Self::from_w_grid(curve, sd.w, TransformMode::SmallDriftApprox(d))?;
        Ok((bundle, sd.validity_warnings))
    }

    /// Exact transform for the exponential coefficient family.
    pub fn closed_form_exponential(curve: &CoefficientCurve, n_grid: usize) -> Result<Self> {
        let p = curve.exponential_params().ok_or_else(|| {
            PricingError::InvalidParameter("closed-form mode needs an exponential-family curve".into())
        })?;
        let n = checked_grid(n_grid)?;
        let t_end = curve.horizon();
        let h = t_end / (n - 1) as f64;
        let decay = |kk: f64, t: f64| -> f64 {
            // int_0^t e^{-kk s} ds
            if kk.abs() < 1e-12 { t } else { (1.0 - (-kk * t).exp()) / kk }
        };
        let mut t_grid = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * h;
            t_grid.push(t);
            w.push(p.q0 - p.r0 * (-p.r_k * t).exp());
            let int_w = p.q0 * t - p.r0 * decay(p.r_k, t);
            g.push(int_w.exp());
            // k = 1/2 [log g - q0 t + 3 int_0^t r], all analytic here
            k.push(0.5 * (int_w - p.q0 * t + 3.0 * p.r0 * decay(p.r_k, t)));
        }
        let a = vec![0.0; n];
        // tau by per-cell Gauss-Kronrod of the analytic integrand
        let integrand = |t: f64| {
            let sig = p.sigma0 * (-p.sigma_k * t).exp();
            let int_w = p.q0 * t - p.r0 * decay(p.r_k, t);
            sig * sig * (2.0 * int_w).exp()
        };
        let mut tau = vec![0.0; n];
        for i in (0..n - 1).rev() {
            tau[i] = tau[i + 1] + 0.5 * gk15_value(&integrand, t_grid[i], t_grid[i + 1]);
        }
        Ok(Self {
            curve: curve.clone(),
            t_grid,
            h,
            w,
            g,
            k,
            a,
            tau,
            mode: TransformMode::ClosedFormExponential,
        })
    }

    /// Assemble g, k, a, tau from w sampled on the uniform grid.
    pub fn from_w_grid(curve: &CoefficientCurve, w: Vec<f64>, mode: TransformMode) -> Result<Self> {
        let n = w.len();
        checked_grid(n)?;
        let t_end = curve.horizon();
        let h = t_end / (n - 1) as f64;
        let t_grid: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();

        let int_w = cumulative_uniform(&w, h);
        let g: Vec<f64> = int_w.iter().map(|c| c.exp()).collect();

        let mut three_r_minus_q = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut sig2g2 = Vec::with_capacity(n);
        for i in 0..n {
            let v = curve.eval(t_grid[i])?;
            three_r_minus_q.push(3.0 * v.r - v.q);
            // a = (g' + g (r - q)) / (2 g^3 sigma^2) with g' = w g
            a.push((w[i] + v.r - v.q) / (2.0 * g[i] * g[i] * v.sigma * v.sigma));
            sig2g2.push(v.sigma * v.sigma * g[i] * g[i]);
        }
        let int_rq = cumulative_uniform(&three_r_minus_q, h);
        let k: Vec<f64> = (0..n).map(|i| 0.5 * int_w[i] + 0.5 * int_rq[i]).collect();

        let cum_var = cumulative_uniform(&sig2g2, h);
        let total = cum_var[n - 1];
        let tau: Vec<f64> = cum_var.iter().map(|c| 0.5 * (total - c)).collect();

        if tau.windows(2).any(|p| p[1] >= p[0]) {
            return Err(PricingError::InvalidParameter(
                "tau(t) is not strictly decreasing; degenerate variance".into(),
            ));
        }
        Ok(Self { curve: curve.clone(), t_grid, h, w, g, k, a, tau, mode })
    }

    pub fn mode(&self) -> TransformMode {
        self.mode
    }

    pub fn curve(&self) -> &CoefficientCurve {
        &self.curve
    }

    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn w_grid(&self) -> &[f64] {
        &self.w
    }

    pub fn g_grid(&self) -> &[f64] {
        &self.g
    }

    pub fn k_grid(&self) -> &[f64] {
        &self.k
    }

    pub fn a_grid(&self) -> &[f64] {
        &self.a
    }

    pub fn tau_grid(&self) -> &[f64] {
        &self.tau
    }

    /// Heat time available at valuation: tau(0).
    pub fn tau0(&self) -> f64 {
        self.tau[0]
    }

    /// int_0^T w ds = log g(T).
    pub fn int_w_total(&self) -> f64 {
        self.g[self.g.len() - 1].ln()
    }

    pub fn g_end(&self) -> f64 {
        self.g[self.g.len() - 1]
    }

    pub fn k_end(&self) -> f64 {
        self.k[self.k.len() - 1]
    }

    pub fn a_end(&self) -> f64 {
        self.a[self.a.len() - 1]
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.horizon() {
            return Err(PricingError::OutOfDomain {
                what: "t",
                value: t,
                min: 0.0,
                max: self.horizon(),
            });
        }
        Ok(())
    }

    pub fn w_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(interp_cubic(self.h, &self.w, t))
    }

    pub fn g_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(interp_cubic(self.h, &self.g, t))
    }

    pub fn k_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(interp_cubic(self.h, &self.k, t))
    }

    pub fn a_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(interp_cubic(self.h, &self.a, t))
    }

    /// tau(t) via cubic interpolation of the stored grid.
    pub fn tau_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(interp_cubic(self.h, &self.tau, t).max(0.0))
    }

    /// f(x, t) = k(t) - a(t) x^2.
    pub fn eval_f(&self, x: f64, t: f64) -> Result<f64> {
        Ok(self.k_at(t)? - self.a_at(t)? * x * x)
    }

    /// Invert the time change: find t with tau(t) = tau, to within
    /// 1e-12 tau(0) in tau units.
    pub fn invert_tau(&self, tau: f64) -> Result<f64> {
        let tau0 = self.tau0();
        if !tau.is_finite() || tau < -1e-12 * tau0 || tau > tau0 * (1.0 + 1e-12) {
            return Err(PricingError::OutOfDomain { what: "tau", value: tau, min: 0.0, max: tau0 });
        }
        let tau = tau.clamp(0.0, tau0);
        if tau == 0.0 {
            return Ok(self.horizon());
        }
        if tau == tau0 {
            return Ok(0.0);
        }
        // grid values are decreasing; bracket by binary search
        let n = self.tau.len();
        let (mut lo, mut hi) = (0usize, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.tau[mid] >= tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut a = self.t_grid[lo];
        let mut b = self.t_grid[hi];
        let mut t = a + (self.tau[lo] - tau) / (self.tau[lo] - self.tau[hi]) * (b - a);
        // safeguarded Newton on the cubic interpolant
        for _ in 0..80 {
            let ft = interp_cubic(self.h, &self.tau, t) - tau;
            if ft.abs() <= 1e-13 * tau0 {
                return Ok(t.clamp(0.0, self.horizon()));
            }
            if ft > 0.0 {
                a = t;
            } else {
                b = t;
            }
            let v = self.curve.eval(t.clamp(0.0, self.horizon()))?;
            let g = interp_cubic(self.h, &self.g, t);
            let slope = -0.5 * v.sigma * v.sigma * g * g;
            let mut t_new = t - ft / slope;
            if !(t_new > a && t_new < b) {
                t_new = 0.5 * (a + b);
            }
            if (t_new - t).abs() < 1e-16 * self.horizon().max(1.0) {
                return Ok(t_new.clamp(0.0, self.horizon()));
            }
            t = t_new;
        }
        Ok(t.clamp(0.0, self.horizon()))
    }

    /// Sample y(tau) = H g(t(tau)) on a uniform tau grid of `n_tau` points
    /// spanning [0, tau(0)].
    pub fn moving_boundary(&self, barrier: f64, n_tau: usize) -> Result<MovingBoundary> {
        if !(barrier > 0.0) {
            return Err(PricingError::InvalidParameter(format!("barrier must be positive, got {barrier}")));
        }
        if n_tau < 2 {
            return Err(PricingError::InvalidParameter("n_tau must be at least 2".into()));
        }
        let tau0 = self.tau0();
        let mut tau_grid = Vec::with_capacity(n_tau);
        let mut y = Vec::with_capacity(n_tau);
        let mut t_of_tau = Vec::with_capacity(n_tau);
        for j in 0..n_tau {
            let tau = tau0 * j as f64 / (n_tau - 1) as f64;
            let t = self.invert_tau(tau)?;
            tau_grid.push(tau);
            t_of_tau.push(t);
            y.push(barrier * self.g_at(t)?);
        }
        Ok(MovingBoundary { tau_grid, y, t_of_tau })
    }

    /// Dump (t, w, g, k, a, tau) rows for inspection.
    pub fn write_diagnostic_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,w,g,k,a,tau")?;
        for i in 0..self.t_grid.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.t_grid[i], self.w[i], self.g[i], self.k[i], self.a[i], self.tau[i]
            )?;
        }
        Ok(())
    }
}

impl MovingBoundary {
    pub fn tau_max(&self) -> f64 {
        *self.tau_grid.last().unwrap()
    }

    /// y(0): boundary level at maturity.
    pub fn y_at_maturity(&self) -> f64 {
        self.y[0]
    }

    /// Interpolated boundary level at an arbitrary tau in range.
    pub fn y_at(&self, tau: f64) -> f64 {
        let n = self.tau_grid.len();
        let h = self.tau_grid[1] - self.tau_grid[0];
        let tau = tau.clamp(0.0, self.tau_max());
        if n < 4 {
            // linear fallback for tiny grids
            let i = ((tau / h) as usize).min(n - 2);
            let s = (tau - self.tau_grid[i]) / h;
            return self.y[i] * (1.0 - s) + self.y[i + 1] * s;
        }
        interp_cubic(h, &self.y, tau)
    }
}

fn checked_grid(n: usize) -> Result<usize> {
    if n < 17 {
        return Err(PricingError::InvalidParameter(format!(
            "time grid needs at least 17 nodes, got {n}"
        )));
    }
    if n % 2 == 0 {
        return Err(PricingError::InvalidParameter(format!(
            "time grid needs an odd node count, got {n}"
        )));
    }
    Ok(n)
}

/// Four-point Lagrange interpolation on a uniform grid starting at 0.
fn interp_cubic(h: f64, vals: &[f64], t: f64) -> f64 {
    let n = vals.len();
    let pos = t / h;
    let i = (pos.floor() as isize).clamp(1, n as isize - 3) as usize;
    let x = pos - i as f64;
    let xm1 = x + 1.0;
    let x1 = x - 1.0;
    let x2 = x - 2.0;
    -vals[i - 1] * x * x1 * x2 / 6.0 + vals[i] * xm1 * x1 * x2 / 2.0 - vals[i + 1] * xm1 * x * x2 / 2.0
        + vals[i + 2] * xm1 * x * x1 / 6.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::termstructure::ExponentialParams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table1(horizon: f64) -> CoefficientCurve {
        CoefficientCurve::exponential(
            ExponentialParams { r0: 0.02, q0: 0.01, sigma0: 45.0, r_k: 0.1, sigma_k: 0.2 },
            horizon,
        )
        .unwrap()
    }

    fn flat_curve(r: f64, q: f64, sigma: f64, horizon: f64) -> CoefficientCurve {
        CoefficientCurve::piecewise_constant(vec![0.0], vec![r], vec![q], vec![sigma], horizon)
            .unwrap()
    }

    #[test]
    fn riccati_matches_exponential_closed_form() {
        let curve = table1(1.0);
        let w = solve_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        assert_abs_diff_eq!(w[0], -0.01, epsilon = 1e-15);
        let w1_expected = 0.01 - 0.02 * (-0.1f64).exp();
        assert_relative_eq!(w[2000], w1_expected, max_relative = 1e-10);
        assert_relative_eq!(w[2000], -0.0080967, max_relative = 1e-4);
        // full grid against wSol
        for (i, wi) in w.iter().enumerate() {
            let t = i as f64 / 2000.0;
            let exact = 0.01 - 0.02 * (-0.1 * t).exp();
            assert_abs_diff_eq!(*wi, exact, epsilon = 1e-11);
        }
    }

    #[test]
    fn riccati_zero_when_r_equals_q() {
        let curve = flat_curve(0.02, 0.02, 30.0, 1.0);
        let w = solve_riccati(&curve, 201, RiccatiInit::QMinusR).unwrap();
        for wi in w {
            assert_abs_diff_eq!(wi, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn riccati_self_convergence_piecewise() {
        // independent oracle: fixed-step RK4 at 10x resolution
        let curve = CoefficientCurve::piecewise_constant(
            vec![0.0, 0.4, 0.7],
            vec![0.05, 0.02, 0.03],
            vec![0.01, 0.015, 0.0],
            vec![30.0, 35.0, 25.0],
            1.0,
        )
        .unwrap();
        let n = 201;
        let w = solve_riccati(&curve, n, RiccatiInit::QMinusR).unwrap();

        let fine = 10 * (n - 1);
        let h = 1.0 / fine as f64;
        let mut y = -0.04; // q(0) - r(0)
        let mut reference = vec![y];
        for step in 0..fine {
            let t = step as f64 * h;
            // sample the open interval so endpoint stages do not read the
            // next segment's coefficients across a knot
            let f = |tt: f64, yy: f64| riccati_rhs(&curve, (tt - 1e-12).max(t).min(1.0), yy);
            let k1 = f(t, y);
            let k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
            let k4 = f(t + h, y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            reference.push(y);
        }
        for i in 0..n {
            assert_abs_diff_eq!(w[i], reference[10 * i], epsilon = 1e-8);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        // large forced w(0) blows up through the quadratic term
        let curve = flat_curve(0.0, 0.0, 20.0, 1.0);
        let res = solve_riccati(&curve, 201, RiccatiInit::Value(50.0));
        match res {
            Err(PricingError::BlowUp { time, .. }) => assert!(time > 0.0 && time < 1.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn small_drift_constant_sigma() {
        let sigma = 20.0;
        let t_end = 1.0;
        let curve = flat_curve(0.01, 0.01, sigma, t_end);
        let d = 2.0 * sigma * sigma * t_end;
        let sd = small_drift_w(&curve, 101, d).unwrap();
        for (i, wi) in sd.w.iter().enumerate() {
            let t = i as f64 / 100.0;
            assert_relative_eq!(*wi, 1.0 / (2.0 * t_end - t), max_relative = 1e-10);
        }
    }

    #[test]
    fn small_drift_agrees_with_riccati_when_drift_vanishes() {
        // epsilon = 0 variant of the test family: r = q = 0.02 flat,
        // sigma keeps its exponential decay
        let curve = CoefficientCurve::sampled(
            (0..=50).map(|i| i as f64 * 0.02).collect(),
            vec![0.02; 51],
            vec![0.02; 51],
            (0..=50).map(|i| 45.0 * (-0.2 * i as f64 * 0.02).exp()).collect(),
            1.0,
        )
        .unwrap();
        let d = 5.0e5;
        let sd = small_drift_w(&curve, 401, d).unwrap();
        let w0 = sd.w[0];
        let ric = solve_riccati(&curve, 401, RiccatiInit::Value(w0)).unwrap();
        for i in 0..401 {
            assert_abs_diff_eq!(sd.w[i], ric[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn small_drift_limits_and_errors() {
        let curve = table1(1.0);
        let sd = small_drift_w(&curve, 101, 1e12).unwrap();
        assert!(sd.w.iter().all(|w| w.abs() < 1e-8));
        let total_var = curve.integrate(Integrand::SigmaSquared, 0.0, 1.0).unwrap();
        assert!(matches!(
            small_drift_w(&curve, 101, total_var * 0.5),
            Err(PricingError::InvalidParameter(_))
        ));
    }

    #[test]
    fn bundle_matches_gsol_and_kt() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let g1 = (0.01 + 0.2 * ((-0.1f64).exp() - 1.0)).exp();
        assert_relative_eq!(bundle.g_end(), g1, max_relative = 1e-9);
        assert_relative_eq!(bundle.g_end(), 0.991008, max_relative = 1e-6);
        let k1 = 0.5 * (g1.ln() - 0.01 + 0.6 * (1.0 - (-0.1f64).exp()));
        assert_relative_eq!(bundle.k_end(), k1, max_relative = 1e-9);
        assert_eq!(bundle.g_grid()[0], 1.0);
    }

    #[test]
    fn degenerate_heat_case() {
        // r = q = 0, sigma constant, w = 0: tau = sigma^2 (T - t) / 2,
        // g = 1, k = 0, a = 0
        let sigma = 10.0;
        let curve = flat_curve(0.0, 0.0, sigma, 2.0);
        let bundle =
            TransformBundle::from_w_grid(&curve, vec![0.0; 201], TransformMode::RiccatiNumeric)
                .unwrap();
        for i in 0..201 {
            let t = 2.0 * i as f64 / 200.0;
            assert_abs_diff_eq!(bundle.g_grid()[i], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(bundle.k_grid()[i], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(bundle.a_grid()[i], 0.0, epsilon = 1e-15);
            assert_relative_eq!(
                bundle.tau_grid()[i],
                0.5 * sigma * sigma * (2.0 - t),
                max_relative = 1e-12,
                epsilon = 1e-12
            );
            let x = 3.0 + i as f64;
            assert_abs_diff_eq!(bundle.eval_f(x, t).unwrap(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn eval_f_at_maturity_is_k_t() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let expected = bundle.k_end();
        assert_relative_eq!(bundle.eval_f(0.0, 1.0).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn invert_tau_round_trips() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        assert_abs_diff_eq!(bundle.invert_tau(0.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bundle.invert_tau(bundle.tau0()).unwrap(), 0.0, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let tau = bundle.tau_at(t).unwrap();
            let back = bundle.invert_tau(tau).unwrap();
            assert_abs_diff_eq!(back, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn tau_is_strictly_decreasing() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 801, RiccatiInit::QMinusR).unwrap();
        assert!(bundle.tau_grid().windows(2).all(|p| p[1] < p[0]));
        assert_eq!(*bundle.tau_grid().last().unwrap(), 0.0);
    }

    #[test]
    fn moving_boundary_levels() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let mb = bundle.moving_boundary(90.0, 65).unwrap();
        // y(0) = H g(T), y(tau(0)) = H g(0) = H
        assert_relative_eq!(mb.y_at_maturity(), 90.0 * bundle.g_end(), max_relative = 1e-10);
        assert_relative_eq!(mb.y_at_maturity(), 89.19, max_relative = 1e-4);
        assert_relative_eq!(*mb.y.last().unwrap(), 90.0, max_relative = 1e-10);
        assert!(mb.y.iter().all(|y| *y > 0.0));

        // constant-w boundary stays flat
        let flat = flat_curve(0.0, 0.0, 10.0, 1.0);
        let fb = TransformBundle::from_w_grid(&flat, vec![0.0; 201], TransformMode::RiccatiNumeric)
            .unwrap();
        let mbf = fb.moving_boundary(50.0, 33).unwrap();
        for y in &mbf.y {
            assert_abs_diff_eq!(*y, 50.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn g_ode_residual_via_finite_differences() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let h = 1.0 / 2000.0;
        let g = bundle.g_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let i = rng.gen_range(1..2000usize);
            let t = i as f64 * h;
            let v = curve.eval(t).unwrap();
            let d = curve.eval_derivatives(t).unwrap();
            let drift = v.r - v.q;
            let b = 2.0 * drift * d.dsigma / v.sigma - (drift * drift + d.dr - d.dq);
            let gp = (g[i + 1] - g[i - 1]) / (2.0 * h);
            let gpp = (g[i + 1] - 2.0 * g[i] + g[i - 1]) / (h * h);
            let residual = b * g[i] - gpp + 2.0 * gp * d.dsigma / v.sigma + 2.0 * gp * gp / g[i];
            assert_abs_diff_eq!(residual, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn closed_form_mode_matches_numeric_mode() {
        let curve = table1(1.0);
        let numeric = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let closed = TransformBundle::closed_form_exponential(&curve, 2001).unwrap();
        let n = 2001;
        for i in 0..n {
            assert_abs_diff_eq!(numeric.w_grid()[i], closed.w_grid()[i], epsilon = 1e-10);
            assert_relative_eq!(numeric.g_grid()[i], closed.g_grid()[i], max_relative = 1e-8);
            assert_abs_diff_eq!(numeric.k_grid()[i], closed.k_grid()[i], epsilon = 1e-8);
            assert_relative_eq!(
                numeric.tau_grid()[i],
                closed.tau_grid()[i],
                max_relative = 1e-8,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn diagnostic_csv_has_header_and_rows() {
        let curve = table1(1.0);
        let bundle = TransformBundle::with_riccati(&curve, 101, RiccatiInit::QMinusR).unwrap();
        let mut buf = Vec::new();
        bundle.write_diagnostic_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,w,g,k,a,tau\n"));
        assert_eq!(text.lines().count(), 102);
    }
}

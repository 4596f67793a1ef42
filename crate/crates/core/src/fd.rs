//! Independent finite-difference oracle: backward Crank-Nicolson with
//! Rannacher start-up on a non-uniform (sinh-stretched) spot grid, for
//! barrier, vanilla and projected American problems.

use crate::error::{PricingError, Result};
use crate::termstructure::CoefficientCurve;

/// Fraction of the reference level used as the sinh stretch width.
pub const DEFAULT_STRETCH: f64 = 0.2;

/// Default number of fully implicit half steps before Crank-Nicolson.
pub const DEFAULT_RANNACHER: usize = 4;

/// Grid solution at t = 0.
#[derive(Debug, Clone)]
pub struct FdSolution {
    pub s_nodes: Vec<f64>,
    pub values: Vec<f64>,
    /// Exercise boundary samples (t, S_b) for the projected American
    /// solve, from valuation time toward maturity.
    pub boundary: Vec<(f64, f64)>,
}

impl FdSolution {
    /// Four-point Lagrange interpolation on the non-uniform grid.
    pub fn value_at(&self, s: f64) -> f64 {
        interp_nonuniform(&self.s_nodes, &self.values, s)
    }
}

fn interp_nonuniform(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let mut lo = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => return ys[i],
        Err(i) => i.saturating_sub(1),
    };
    lo = lo.clamp(1, n.saturating_sub(3)).min(n - 2);
    let i0 = lo - 1;
    let mut acc = 0.0;
    for a in 0..4 {
        let mut l = 1.0;
        for b in 0..4 {
            if a != b {
                l *= (x - xs[i0 + b]) / (xs[i0 + a] - xs[i0 + b]);
            }
        }
        acc += l * ys[i0 + a];
    }
    acc
}

/// Sinh-stretched nodes on [a, b] clustered around `center`, with the
/// first and last nodes pinned exactly to the panel ends.
fn sinh_panel(a: f64, b: f64, center: f64, alpha: f64, n: usize) -> Vec<f64> {
    let xi_a = ((a - center) / alpha).asinh();
    let xi_b = ((b - center) / alpha).asinh();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xi = xi_a + (xi_b - xi_a) * i as f64 / (n - 1) as f64;
        out.push(center + alpha * xi.sinh());
    }
    out[0] = a;
    out[n - 1] = b;
    out
}

/// Barrier grid on [0, H]: nodes clustered near the strike (payoff kink)
/// and near the barrier. Both K and H are exact grid nodes.
pub fn barrier_grid(strike: f64, barrier: f64, n: usize) -> Result<Vec<f64>> {
    if !(strike > 0.0 && strike < barrier) {
        return Err(PricingError::InvalidParameter(format!(
            "barrier grid needs 0 < K < H, got K={strike}, H={barrier}"
        )));
    }
    if n < 51 {
        return Err(PricingError::InvalidParameter("barrier grid needs N >= 51".into()));
    }
    let alpha = DEFAULT_STRETCH * barrier;
    let n_lower = ((n as f64 * strike / barrier).round() as usize).clamp(8, n - 8);
    let n_upper = n + 1 - n_lower;
    let mut nodes = sinh_panel(0.0, strike, strike, alpha, n_lower);
    let upper = sinh_panel(strike, barrier, barrier, alpha, n_upper);
    nodes.extend_from_slice(&upper[1..]);
    Ok(nodes)
}

/// Vanilla / American grid on [s_min, s_max] clustered around the strike.
pub fn vanilla_grid(strike: f64, s_min: f64, s_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(s_min < strike && strike < s_max) {
        return Err(PricingError::InvalidParameter(format!(
            "vanilla grid needs s_min < K < s_max, got [{s_min}, {s_max}] around {strike}"
        )));
    }
    if n < 51 {
        return Err(PricingError::InvalidParameter("vanilla grid needs N >= 51".into()));
    }
    let alpha = DEFAULT_STRETCH * strike;
    let share = (strike - s_min) / (s_max - s_min);
    let n_lower = ((n as f64 * share).round() as usize).clamp(8, n - 8);
    let n_upper = n + 1 - n_lower;
    let mut nodes = sinh_panel(s_min, strike, strike, alpha, n_lower);
    let upper = sinh_panel(strike, s_max, strike, alpha, n_upper);
    nodes.extend_from_slice(&upper[1..]);
    Ok(nodes)
}

/// Spot domain for vanilla and American solves: wide enough for the
/// Gaussian terminal mass and the far-field linearity condition.
pub fn default_vanilla_domain(
    curve: &CoefficientCurve,
    strike: f64,
    maturity: f64,
) -> Result<(f64, f64)> {
    let (_, _, var_bar) = curve.effective_constants(maturity)?;
    let width = 8.0 * (var_bar * maturity).sqrt();
    Ok(((strike - width).min(0.0), (4.0 * strike).max(strike + width)))
}

#[derive(Clone, Copy)]
enum LeftBoundary {
    Dirichlet,
    Linearity,
}

#[derive(Clone, Copy)]
enum RightBoundary {
    Dirichlet,
    Linearity,
}

struct Stepper<'a> {
    curve: &'a CoefficientCurve,
    s: &'a [f64],
    left: LeftBoundary,
    right: RightBoundary,
    // tridiagonal bands over interior nodes plus scratch
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    c_star: Vec<f64>,
    d_star: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(
        curve: &'a CoefficientCurve,
        s: &'a [f64],
        left: LeftBoundary,
        right: RightBoundary,
    ) -> Self {
        let m = s.len() - 2;
        Self {
            curve,
            s,
            left,
            right,
            lower: vec![0.0; m],
            diag: vec![0.0; m],
            upper: vec![0.0; m],
            rhs: vec![0.0; m],
            c_star: vec![0.0; m],
            d_star: vec![0.0; m],
        }
    }

    /// Spatial operator bands (lower, diag, upper) at interior node i.
    fn operator_row(&self, i: usize, t: f64) -> (f64, f64, f64) {
        let t = t.clamp(0.0, self.curve.horizon());
        let v = self.curve.eval(t).expect("solver time inside curve domain");
        let h_m = self.s[i] - self.s[i - 1];
        let h_p = self.s[i + 1] - self.s[i];
        let half_var = 0.5 * v.sigma * v.sigma;
        let drift = (v.r - v.q) * self.s[i];
        let lo = 2.0 * half_var / (h_m * (h_m + h_p)) - drift * h_p / (h_m * (h_m + h_p));
        let up = 2.0 * half_var / (h_p * (h_m + h_p)) + drift * h_m / (h_p * (h_m + h_p));
        let di = -2.0 * half_var / (h_m * h_p) + drift * (h_p - h_m) / (h_m * h_p) - v.r;
        (lo, di, up)
    }

    /// One theta-scheme step from known values at t + dt down to t.
    fn step(&mut self, values: &mut [f64], t: f64, dt: f64, theta: f64) -> Result<()> {
        let n = self.s.len();
        let m = n - 2;
        let t_eval = if theta < 1.0 { t + 0.5 * dt } else { t };

        // explicit side
        for i in 1..n - 1 {
            let (lo, di, up) = self.operator_row(i, t_eval);
            self.rhs[i - 1] = values[i]
                + (1.0 - theta) * dt * (lo * values[i - 1] + di * values[i] + up * values[i + 1]);
        }
        // implicit side
        for i in 1..n - 1 {
            let (lo, di, up) = self.operator_row(i, t_eval);
            self.lower[i - 1] = -theta * dt * lo;
            self.diag[i - 1] = 1.0 - theta * dt * di;
            self.upper[i - 1] = -theta * dt * up;
        }
        // fold boundary closures into the first/last interior rows
        match self.left {
            LeftBoundary::Dirichlet => {
                self.lower[0] = 0.0;
            }
            LeftBoundary::Linearity => {
                // V_0 = (1 + rho) V_1 - rho V_2, rho = h0 / h1
                let rho = (self.s[1] - self.s[0]) / (self.s[2] - self.s[1]);
                let lo = self.lower[0];
                self.diag[0] += lo * (1.0 + rho);
                self.upper[0] -= lo * rho;
                self.lower[0] = 0.0;
            }
        }
        match self.right {
            RightBoundary::Dirichlet => {
                self.upper[m - 1] = 0.0;
            }
            RightBoundary::Linearity => {
                let rho = (self.s[n - 1] - self.s[n - 2]) / (self.s[n - 2] - self.s[n - 3]);
                let up = self.upper[m - 1];
                self.diag[m - 1] += up * (1.0 + rho);
                self.lower[m - 1] -= up * rho;
                self.upper[m - 1] = 0.0;
            }
        }

        solve_tridiagonal(
            &self.lower,
            &self.diag,
            &self.upper,
            &self.rhs,
            &mut self.c_star,
            &mut self.d_star,
            &mut values[1..n - 1],
        )?;
        self.apply_boundaries(values);
        Ok(())
    }

    fn apply_boundaries(&self, values: &mut [f64]) {
        let n = self.s.len();
        match self.left {
            LeftBoundary::Dirichlet => values[0] = 0.0,
            LeftBoundary::Linearity => {
                let rho = (self.s[1] - self.s[0]) / (self.s[2] - self.s[1]);
                values[0] = (1.0 + rho) * values[1] - rho * values[2];
            }
        }
        match self.right {
            RightBoundary::Dirichlet => values[n - 1] = 0.0,
            RightBoundary::Linearity => {
                let rho = (self.s[n - 1] - self.s[n - 2]) / (self.s[n - 2] - self.s[n - 3]);
                values[n - 1] = (1.0 + rho) * values[n - 2] - rho * values[n - 3];
            }
        }
    }

    /// Re-solve the last assembled system with exercised rows pinned to
    /// intrinsic values (one policy-iteration sweep).
    fn resolve_with_exercise(
        &mut self,
        values: &mut [f64],
        intrinsic: &[f64],
        exercised: &[bool],
    ) -> Result<()> {
        let n = self.s.len();
        let mut lower = self.lower.clone();
        let mut diag = self.diag.clone();
        let mut upper = self.upper.clone();
        let mut rhs = self.rhs.clone();
        for i in 1..n - 1 {
            if exercised[i] {
                lower[i - 1] = 0.0;
                diag[i - 1] = 1.0;
                upper[i - 1] = 0.0;
                rhs[i - 1] = intrinsic[i];
            }
        }
        solve_tridiagonal(
            &lower,
            &diag,
            &upper,
            &rhs,
            &mut self.c_star,
            &mut self.d_star,
            &mut values[1..n - 1],
        )?;
        self.apply_boundaries(values);
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
    c_star: &mut [f64],
    d_star: &mut [f64],
    x: &mut [f64],
) -> Result<()> {
    let n = diag.len();
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(PricingError::InstabilityDetected { detail: "singular tridiagonal".into() });
    }
    c_star[0] = upper[0] / denom;
    d_star[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_star[i - 1];
        if denom.abs() < 1e-300 {
            return Err(PricingError::InstabilityDetected {
                detail: "singular tridiagonal".into(),
            });
        }
        c_star[i] = upper[i] / denom;
        d_star[i] = (rhs[i] - lower[i] * d_star[i - 1]) / denom;
    }
    x[n - 1] = d_star[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d_star[i] - c_star[i] * x[i + 1];
    }
    Ok(())
}

/// Time-step schedule: Rannacher half steps (fully implicit) followed by
/// Crank-Nicolson, marching from maturity toward t = 0.
fn schedule(maturity: f64, n_steps: usize, rannacher: usize) -> Vec<(f64, f64, f64)> {
    let dt = maturity / n_steps as f64;
    let half_pairs = (rannacher / 2).min(n_steps);
    let mut steps = Vec::new();
    let mut t_hi = maturity;
    for _ in 0..half_pairs {
        for _ in 0..2 {
            steps.push((t_hi - 0.5 * dt, 0.5 * dt, 1.0));
            t_hi -= 0.5 * dt;
        }
    }
    let remaining = n_steps - half_pairs;
    for _ in 0..remaining {
        steps.push((t_hi - dt, dt, 0.5));
        t_hi -= dt;
    }
    steps
}

/// Backward solve of the pricing PDE for a European payoff.
///
/// `barrier_flag` selects absorbing (Dirichlet zero) conditions at both
/// ends of the grid; otherwise far-field linearity is applied.
pub fn solve_backward(
    curve: &CoefficientCurve,
    s_nodes: &[f64],
    maturity: f64,
    n_steps: usize,
    rannacher_steps: usize,
    payoff: &dyn Fn(f64) -> f64,
    barrier_flag: bool,
) -> Result<FdSolution> {
    check_solve_inputs(curve, s_nodes, maturity, n_steps)?;
    let (left, right) = if barrier_flag {
        (LeftBoundary::Dirichlet, RightBoundary::Dirichlet)
    } else {
        (LeftBoundary::Linearity, RightBoundary::Linearity)
    };
    let mut values: Vec<f64> = s_nodes.iter().map(|&s| payoff(s)).collect();
    if barrier_flag {
        values[0] = 0.0;
        *values.last_mut().unwrap() = 0.0;
    }
    let cap = 10.0 * values.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut stepper = Stepper::new(curve, s_nodes, left, right);
    for (t, dt, theta) in schedule(maturity, n_steps, rannacher_steps) {
        stepper.step(&mut values, t, dt, theta)?;
        check_stability(&values, cap)?;
    }
    Ok(FdSolution { s_nodes: s_nodes.to_vec(), values, boundary: Vec::new() })
}

/// Backward solve with the early-exercise constraint: per-step projection
/// onto the intrinsic value plus one policy-iteration sweep. The spot
/// grid starts at S = 0 with an absorbing lower boundary.
pub fn solve_american_projected(
    curve: &CoefficientCurve,
    s_nodes: &[f64],
    maturity: f64,
    n_steps: usize,
    rannacher_steps: usize,
    payoff: &dyn Fn(f64) -> f64,
) -> Result<FdSolution> {
    check_solve_inputs(curve, s_nodes, maturity, n_steps)?;
    let n = s_nodes.len();
    let intrinsic: Vec<f64> = s_nodes.iter().map(|&s| payoff(s)).collect();
    let mut values = intrinsic.clone();
    let cap = 10.0 * values.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut stepper =
        Stepper::new(curve, s_nodes, LeftBoundary::Dirichlet, RightBoundary::Linearity);
    let mut boundary = Vec::new();
    let mut exercised = vec![false; n];
    for (t, dt, theta) in schedule(maturity, n_steps, rannacher_steps) {
        stepper.step(&mut values, t, dt, theta)?;
        for i in 0..n {
            exercised[i] = values[i] <= intrinsic[i] && intrinsic[i] > 0.0;
            if exercised[i] {
                values[i] = intrinsic[i];
            }
        }
        stepper.resolve_with_exercise(&mut values, &intrinsic, &exercised)?;
        for i in 0..n {
            if values[i] < intrinsic[i] {
                values[i] = intrinsic[i];
            }
        }
        check_stability(&values, cap)?;
        // exercise boundary: lowest node of the contiguous top region
        // where the constraint binds
        let eps = 1e-10 * cap;
        let mut b_idx = None;
        for i in (1..n).rev() {
            if intrinsic[i] > 0.0 && values[i] - intrinsic[i] <= eps {
                b_idx = Some(i);
            } else {
                break;
            }
        }
        if let Some(i) = b_idx {
            boundary.push((t, s_nodes[i]));
        }
    }
    Ok(FdSolution { s_nodes: s_nodes.to_vec(), values, boundary })
}

fn check_solve_inputs(
    curve: &CoefficientCurve,
    s_nodes: &[f64],
    maturity: f64,
    n_steps: usize,
) -> Result<()> {
    if s_nodes.len() < 51 {
        return Err(PricingError::InvalidParameter("need at least 51 space nodes".into()));
    }
    if s_nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PricingError::InvalidParameter("space nodes must be strictly increasing".into()));
    }
    if n_steps < 10 {
        return Err(PricingError::InvalidParameter("need at least 10 time steps".into()));
    }
    if !(maturity > 0.0) || maturity > curve.horizon() {
        return Err(PricingError::OutOfDomain {
            what: "maturity",
            value: maturity,
            min: 0.0,
            max: curve.horizon(),
        });
    }
    Ok(())
}

fn check_stability(values: &[f64], cap: f64) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v.abs() > cap {
            return Err(PricingError::InstabilityDetected {
                detail: format!("node value {v:.3e} beyond 10x payoff bound"),
            });
        }
    }
    Ok(())
}

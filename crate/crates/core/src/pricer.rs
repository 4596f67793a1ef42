//! Price assembly: Up-and-Out barrier calls from the theta-kernel
//! reconstruction, American calls from the lifted reconstruction on the
//! solved exercise boundary, European calls from effective constants, and
//! Down-and-Out calls by parity.

use crate::error::{PricingError, Result};
use crate::fredholm::{
    american_boundary_data, american_p_grid, assemble_kernel, default_p_grid, graded_tau_grid,
    rhs_f, solve_american_boundary, solve_psi, AmericanSolveParams, FredholmSolution,
    RegularizationSpec, SmoothingOperator, SolutionKind,
};
use crate::quad::{gl64_unit, simpson_uniform};
use crate::termstructure::CoefficientCurve;
use crate::theta::{IntegratedKernel, ThetaDiffKernel};
use crate::transform::{MovingBoundary, RiccatiInit, TransformBundle, DEFAULT_GRID};
use rayon::prelude::*;
use statrs::function::erf::erf;
use std::time::Instant;

/// Product selector for lattice runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Product {
    UpOutCall,
    DownOutCall,
    AmericanCall,
    EuropeanCall,
}

impl Product {
    pub fn label(&self) -> &'static str {
        match self {
            Product::UpOutCall => "up_out_call",
            Product::DownOutCall => "down_out_call",
            Product::AmericanCall => "american_call",
            Product::EuropeanCall => "european_call",
        }
    }
}

/// Numerical knobs with defaults sized for desk-scale accuracy.
#[derive(Debug, Clone, Copy)]
pub struct Numerics {
    /// Nodes of the dense transform grid on [0, T].
    pub n_time_grid: usize,
    /// Flux quadrature nodes on [0, tau(0)] for the barrier solve.
    pub n_tau: usize,
    /// Collocation points in p space.
    pub n_p: usize,
    /// Simpson nodes of the terminal-payoff integral.
    pub n_z: usize,
    pub lambda: RegularizationSpec,
    pub smoothing: SmoothingOperator,
    /// Skip the Fredholm solve and the flux integral.
    pub no_psi: bool,
    pub american: AmericanSolveParams,
    pub n_tau_american: usize,
    pub n_p_american: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            n_time_grid: DEFAULT_GRID,
            n_tau: 49,
            n_p: 12,
            n_z: 401,
            lambda: RegularizationSpec::Auto,
            smoothing: SmoothingOperator::Identity,
            no_psi: false,
            american: AmericanSolveParams::default(),
            n_tau_american: 33,
            n_p_american: 80,
        }
    }
}

/// A single lattice pricing request.
#[derive(Debug, Clone)]
pub struct LatticeRequest {
    pub product: Product,
    pub spot: f64,
    pub barrier: Option<f64>,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
}

impl LatticeRequest {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.spot > 0.0) {
            return Err(PricingError::InvalidParameter(format!("spot must be positive, got {}", self.spot)));
        }
        if self.strikes.is_empty() || self.maturities.is_empty() {
            return Err(PricingError::InvalidParameter("strikes and maturities must be non-empty".into()));
        }
        if self.strikes.iter().any(|k| !(*k > 0.0)) {
            return Err(PricingError::InvalidParameter("strikes must be positive".into()));
        }
        for &t in &self.maturities {
            if !(t > 0.0) || t > horizon {
                return Err(PricingError::OutOfDomain { what: "maturity", value: t, min: 0.0, max: horizon });
            }
        }
        match self.product {
            Product::UpOutCall | Product::DownOutCall => {
                let h = self.barrier.ok_or_else(|| {
                    PricingError::InvalidParameter("barrier products need a barrier level".into())
                })?;
                if !(h > 0.0) {
                    return Err(PricingError::InvalidParameter("barrier must be positive".into()));
                }
                if self.spot >= h {
                    return Err(PricingError::BarrierBreached { spot: self.spot, barrier: h });
                }
                if matches!(self.product, Product::UpOutCall)
                    && self.strikes.iter().any(|k| *k >= h)
                {
                    return Err(PricingError::InvalidParameter(
                        "up-and-out strikes must lie below the barrier".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One priced lattice cell.
#[derive(Debug, Clone)]
pub struct SurfaceCell {
    pub strike: f64,
    pub maturity: f64,
    pub price: f64,
    pub method: &'static str,
    /// |flux contribution| / price (zero when the flux path is skipped).
    pub psi_share: f64,
    pub runtime_ms: f64,
    /// Relative residual of the Fredholm solve feeding this cell.
    pub solve_residual: f64,
}

/// Lattice of prices plus per-cell diagnostics.
#[derive(Debug, Clone, Default)]
pub struct PriceSurface {
    pub cells: Vec<SurfaceCell>,
}

impl PriceSurface {
    /// CSV with the exact column set K,T,price,method,psi_share,runtime_ms.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "K,T,price,method,psi_share,runtime_ms")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.strike, c.maturity, c.price, c.method, c.psi_share, c.runtime_ms
            )?;
        }
        Ok(())
    }

    pub fn price_at(&self, strike: f64, maturity: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.strike == strike && c.maturity == maturity)
            .map(|c| c.price)
    }
}

/// Terminal condition in heat coordinates:
/// u(z, 0) = (z e^{-int w} - K)^+ e^{-f(z, T)}, zero below the mapped
/// strike K1.
#[derive(Debug, Clone, Copy)]
pub struct TerminalCondition {
    pub k1: f64,
    payoff_scale: f64,
    k_end: f64,
    a_end: f64,
}

impl TerminalCondition {
    pub fn eval(&self, z: f64) -> f64 {
        if z <= self.k1 {
            return 0.0;
        }
        self.payoff_scale * (z - self.k1) * (-self.k_end + self.a_end * z * z).exp()
    }
}

/// Build the transformed terminal payoff for a strike.
pub fn terminal_condition(bundle: &TransformBundle, strike: f64) -> TerminalCondition {
    let int_w = bundle.int_w_total();
    TerminalCondition {
        k1: strike * bundle.g_end(),
        payoff_scale: (-int_w).exp(),
        k_end: bundle.k_end(),
        a_end: bundle.a_end(),
    }
}

/// Reconstructed heat solution u(x, tau(0)) for the barrier problem.
///
/// The first term integrates the terminal condition against the theta
/// kernel at nome omega_1; the optional second term integrates the solved
/// boundary flux against the kernel at omega_2(s), regularized at the
/// s -> tau(0) endpoint by the sqrt substitution.
pub fn reconstruct_u_barrier(
    bundle: &TransformBundle,
    boundary: &MovingBoundary,
    psi: Option<&FredholmSolution>,
    strike: f64,
    x: f64,
    numerics: &Numerics,
) -> Result<(f64, f64)> {
    let tau0 = bundle.tau0();
    let y_obs = boundary.y_at(tau0);
    let omega1 = (-(std::f64::consts::PI / y_obs).powi(2) * tau0).exp();
    let kernel1 = ThetaDiffKernel::new(y_obs, omega1)?;
    let tc = terminal_condition(bundle, strike);
    let y0 = boundary.y_at_maturity();

    let z_int = payoff_kernel_integral(&tc, &kernel1, x, y0, tau0, numerics.n_z, None);

    let mut flux_int = 0.0;
    if let Some(sol) = psi {
        let (nodes, weights) = gl64_unit();
        let v_max = tau0.sqrt();
        for (v_unit, w) in nodes.iter().zip(weights) {
            let v = v_unit * v_max;
            let s = tau0 - v * v;
            let delta = tau0 - s;
            if delta <= 0.0 {
                continue;
            }
            let kernel2 = ThetaDiffKernel::from_delta(y_obs, delta)?;
            let y_s = boundary.y_at(s);
            flux_int += w * v_max * 2.0 * v * sol.value_at(s) * kernel2.diff(x, y_s);
        }
    }
    Ok(((z_int + flux_int) / (2.0 * y_obs), flux_int / (2.0 * y_obs)))
}

/// Simpson integral of payoff-like(z) * kernel.diff(x, z) over [0, y0]
/// with the payoff kink pinned to a node. `extra_linear` adds the
/// American lifting -(z / y_ref) psi1(0) below and above the kink.
///
/// The kernel concentrates around z = x with width ~sqrt(2 tau0); panels
/// are clipped to the kernel's support and the node density keys off the
/// kernel width so narrow spikes on wide domains stay resolved.
fn payoff_kernel_integral(
    tc: &TerminalCondition,
    kernel: &ThetaDiffKernel,
    x: f64,
    y0: f64,
    tau0: f64,
    n_z: usize,
    extra_linear: Option<(f64, f64)>, // (psi1_at_maturity, y_ref)
) -> f64 {
    let integrand = |z: f64| {
        let mut v = tc.eval(z);
        if let Some((psi1, y_ref)) = extra_linear {
            v -= z / y_ref * psi1;
        }
        v * kernel.diff(x, z)
    };
    let width = (2.0 * tau0).sqrt();
    let window = 21.0 * width;
    let z_lo = (x - window).max(0.0);
    let z_hi = (x + window).min(y0);
    let mut total = 0.0;
    // panel below the kink: zero unless the lifting term is present
    if extra_linear.is_some() && tc.k1 > 0.0 {
        let lo = z_lo;
        let hi = tc.k1.min(y0).min(z_hi);
        if hi > lo {
            total += simpson_panel(&integrand, lo, hi, n_z, width, y0);
        }
    }
    // payoff panel above the kink
    let lo = tc.k1.max(z_lo);
    let hi = y0.min(z_hi);
    if hi > lo {
        total += simpson_panel(&integrand, lo, hi, n_z, width, y0);
    }
    total
}

fn simpson_panel(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n_z: usize,
    kernel_width: f64,
    domain: f64,
) -> f64 {
    let length = hi - lo;
    let base = (n_z as f64 * length / domain).round() as usize;
    let by_width = (10.0 * length / kernel_width.max(1e-300)).ceil() as usize;
    let mut n = base.max(by_width).clamp(9, 4 * n_z + 9);
    if n % 2 == 0 {
        n += 1;
    }
    let h = length / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| f(lo + i as f64 * h)).collect();
    simpson_uniform(&vals, h)
}

/// Per-price diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriceReport {
    pub price: f64,
    pub psi_share: f64,
    pub solve_residual: f64,
}

/// Up-and-Out barrier call from the reconstruction at x0 = S0 g(0).
pub fn price_barrier_uo_call(
    bundle: &TransformBundle,
    boundary: &MovingBoundary,
    psi: Option<&FredholmSolution>,
    spot: f64,
    strike: f64,
    numerics: &Numerics,
) -> Result<PriceReport> {
    let barrier = boundary.y_at(bundle.tau0()) / bundle.g_at(0.0)?;
    if spot >= barrier {
        return Err(PricingError::BarrierBreached { spot, barrier });
    }
    let x0 = spot * bundle.g_at(0.0)?;
    let (u, flux_part) = reconstruct_u_barrier(bundle, boundary, psi, strike, x0, numerics)?;
    let price = (bundle.eval_f(x0, 0.0)?).exp() * u;
    let price = price.max(0.0);
    Ok(PriceReport {
        price,
        psi_share: if price > 0.0 { (flux_part / u).abs().min(1.0) } else { 0.0 },
        solve_residual: psi.map(|s| s.residual_norm).unwrap_or(0.0),
    })
}

/// European call under the effective-constant reduction: Gaussian
/// terminal distribution with r_bar = (1/T) int r, q_bar = (1/T) int q,
/// sigma_bar^2 = (1/T) int sigma^2.
pub fn price_vanilla(curve: &CoefficientCurve, spot: f64, strike: f64, maturity: f64) -> Result<f64> {
    if !(maturity > 0.0) || maturity > curve.horizon() {
        return Err(PricingError::OutOfDomain {
            what: "maturity",
            value: maturity,
            min: 0.0,
            max: curve.horizon(),
        });
    }
    let (r_bar, q_bar, var_bar) = curve.effective_constants(maturity)?;
    let mu = r_bar - q_bar;
    let mean = spot * (mu * maturity).exp();
    let var = if mu.abs() < 1e-12 {
        var_bar * maturity
    } else {
        var_bar * ((2.0 * mu * maturity).exp() - 1.0) / (2.0 * mu)
    };
    let sd = var.sqrt();
    let disc = (-r_bar * maturity).exp();
    if sd == 0.0 {
        return Ok(disc * (mean - strike).max(0.0));
    }
    let d = (mean - strike) / sd;
    Ok(disc * ((mean - strike) * norm_cdf(d) + sd * norm_pdf(d)))
}

/// Down-and-Out call by parity: C_dao = C_van - C_uao.
pub fn price_barrier_do_call(
    curve: &CoefficientCurve,
    bundle: &TransformBundle,
    boundary: &MovingBoundary,
    psi: Option<&FredholmSolution>,
    spot: f64,
    strike: f64,
    maturity: f64,
    numerics: &Numerics,
) -> Result<PriceReport> {
    let uo = price_barrier_uo_call(bundle, boundary, psi, spot, strike, numerics)?;
    let van = price_vanilla(curve, spot, strike, maturity)?;
    Ok(PriceReport { price: (van - uo.price).max(0.0), ..uo })
}

/// American call price from a solved exercise boundary.
///
/// u = Theta + W with the lifting Theta(x, tau) = (x / y(tau)) psi1(tau);
/// W carries homogeneous boundary values, the boundary flux
/// Psi_W = Psi - psi1/y, and the lifting source -(psi1/y)' integrated
/// against the c_n^-2-weighted kernel sums.
pub fn price_american_call(
    bundle: &TransformBundle,
    solution: &FredholmSolution,
    spot: f64,
    strike: f64,
    numerics: &Numerics,
) -> Result<PriceReport> {
    if solution.kind != SolutionKind::AmericanBoundary {
        return Err(PricingError::InvalidParameter(
            "american pricing needs an AmericanBoundary solution".into(),
        ));
    }
    let tau0 = bundle.tau0();
    let g0 = bundle.g_at(0.0)?;
    let x0 = spot * g0;
    let n_nodes = solution.values.len();
    let y_obs = solution.values[n_nodes - 1];
    let intrinsic = spot - strike;
    if x0 >= y_obs {
        return Ok(PriceReport { price: intrinsic.max(0.0), ..Default::default() });
    }

    // smooth boundary interpolant; slopes come from the interpolant, not
    // from differencing
    let y_curve = crate::termstructure::Pchip::new(
        solution.tau_grid.clone(),
        solution.values.clone(),
    )?;

    let psi1_at_maturity =
        american_boundary_data(bundle, strike, solution.values[0], solution.t_of_tau[0])?.0;
    let tc = terminal_condition(bundle, strike);
    let y0 = solution.values[0];
    let omega1 = (-(std::f64::consts::PI / y_obs).powi(2) * tau0).exp();
    let kernel1 = ThetaDiffKernel::new(y_obs, omega1)?;
    let z_int = payoff_kernel_integral(
        &tc,
        &kernel1,
        x0,
        y0,
        tau0,
        numerics.n_z,
        Some((psi1_at_maturity, y0)),
    );

    // lifting source, integrated by parts: the boundary term at s = tau0
    // cancels Theta(x0, tau0) exactly, leaving P(0) M(0) and an integral
    // of P against the time derivative of the c_n^-2-weighted kernel
    let lifted0 = psi1_at_maturity / y0;
    let m0 = if lifted0 != 0.0 {
        let ik = IntegratedKernel::from_delta(y_obs, tau0)?;
        2.0 / y_obs
            * (0.5 * ik.quad_diff(x0 - y0, x0 + y0)
                - y0 * 0.5 * (ik.weighted_sine(x0 + y0) + ik.weighted_sine(x0 - y0)))
    } else {
        0.0
    };

    // history integrals, split at tau0/2 with sqrt substitutions toward
    // both endpoints (steep boundary near s = 0, theta spike at s = tau0)
    let (nodes, weights) = gl64_unit();
    let mut flux_int = 0.0;
    let mut source_int = lifted0 * m0;
    let half = 0.5 * tau0;
    for (unit, w) in nodes.iter().zip(weights) {
        // lower half: s = w^2, ds = 2 w dw
        let wv = unit * half.sqrt();
        let s = wv * wv;
        let jac = w * half.sqrt() * 2.0 * wv;
        accumulate_american_history(
            bundle, strike, &y_curve, x0, y_obs, tau0, s, jac, &mut flux_int, &mut source_int,
        )?;
        // upper half: s = tau0 - v^2
        let v = unit * half.sqrt();
        let s = tau0 - v * v;
        let jac = w * half.sqrt() * 2.0 * v;
        accumulate_american_history(
            bundle, strike, &y_curve, x0, y_obs, tau0, s, jac, &mut flux_int, &mut source_int,
        )?;
    }

    let u = (z_int + flux_int) / (2.0 * y_obs) + source_int;
    let price = ((bundle.eval_f(x0, 0.0)?).exp() * u).max(intrinsic).max(0.0);
    let psi_share = if u != 0.0 { (flux_int / (2.0 * y_obs) / u).abs().min(1.0) } else { 0.0 };
    Ok(PriceReport { price, psi_share, solve_residual: solution.residual_norm })
}

/// One history-quadrature node of the American reconstruction: the flux
/// term Psi_W theta-kernel plus the by-parts source P dM/ds with
/// dM/ds = (2/y) [(1 + y' Y) S_sin2 - Y S_cos1].
#[allow(clippy::too_many_arguments)]
fn accumulate_american_history(
    bundle: &TransformBundle,
    strike: f64,
    y_curve: &crate::termstructure::Pchip,
    x0: f64,
    y_obs: f64,
    tau0: f64,
    s: f64,
    jac: f64,
    flux_int: &mut f64,
    source_int: &mut f64,
) -> Result<()> {
    let delta = tau0 - s;
    if delta <= 0.0 || s < 0.0 {
        return Ok(());
    }
    let y_s = y_curve.eval(s);
    let y_slope = y_curve.derivative(s);
    let t = bundle.invert_tau(s)?;
    let (psi1, flux) = american_boundary_data(bundle, strike, y_s, t)?;
    let kernel = ThetaDiffKernel::from_delta(y_obs, delta)?;
    let psi_w = flux - psi1 / y_s;
    *flux_int += jac * psi_w * kernel.diff(x0, y_s);

    let s_sin2 = 0.25 * kernel.diff(x0, y_s);
    let s_cos1 = 0.25 * kernel.diff_dz(x0, y_s);
    let dm_ds = 2.0 / y_obs * ((1.0 + y_slope * y_s) * s_sin2 - y_s * s_cos1);
    *source_int += jac * (psi1 / y_s) * dm_ds;
    Ok(())
}

fn linear_on_grid(grid: &[f64], vals: &[f64], s: f64) -> f64 {
    let n = grid.len();
    if s <= grid[0] {
        return vals[0];
    }
    if s >= grid[n - 1] {
        return vals[n - 1];
    }
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if grid[mid] <= s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w = (s - grid[lo]) / (grid[hi] - grid[lo]);
    vals[lo] * (1.0 - w) + vals[hi] * w
}

/// Full semi-analytic American price: build, solve the boundary, price.
/// Falls back to the European price when the boundary diverges (no early
/// exercise region, e.g. q = 0).
pub fn american_price_with_fallback(
    curve: &CoefficientCurve,
    spot: f64,
    strike: f64,
    maturity: f64,
    numerics: &Numerics,
) -> Result<PriceReport> {
    let curve_t = curve.restrict(maturity)?;
    let bundle = TransformBundle::with_riccati(&curve_t, numerics.n_time_grid, RiccatiInit::QMinusR)?;
    let tau_grid = graded_tau_grid(bundle.tau0(), numerics.n_tau_american);
    let p_grid = american_p_grid(bundle.tau0(), numerics.n_p_american);
    match solve_american_boundary(&bundle, strike, &p_grid, &tau_grid, numerics.american) {
        Ok(solution) => price_american_call(&bundle, &solution, spot, strike, numerics),
        Err(PricingError::BoundaryDiverged { .. }) => {
            let price = price_vanilla(curve, spot, strike, maturity)?;
            Ok(PriceReport { price: price.max((spot - strike).max(0.0)), ..Default::default() })
        }
        Err(e) => Err(e),
    }
}

/// Shared per-maturity state for barrier lattices.
struct MaturitySlice {
    maturity: f64,
    bundle: TransformBundle,
    boundary: MovingBoundary,
}

/// Price a strike-by-maturity lattice with the semi-analytic method.
/// Cells evaluate in parallel; output order is maturity-major.
pub fn price_surface_semi(
    curve: &CoefficientCurve,
    request: &LatticeRequest,
    numerics: &Numerics,
) -> Result<PriceSurface> {
    request.validate(curve.horizon())?;
    let cells: Result<Vec<Vec<SurfaceCell>>> = match request.product {
        Product::UpOutCall | Product::DownOutCall => {
            let barrier = request.barrier.expect("validated");
            let slices: Result<Vec<MaturitySlice>> = request
                .maturities
                .iter()
                .map(|&t| {
                    let curve_t = curve.restrict(t)?;
                    let bundle = TransformBundle::with_riccati(
                        &curve_t,
                        numerics.n_time_grid,
                        RiccatiInit::QMinusR,
                    )?;
                    let boundary = bundle.moving_boundary(barrier, numerics.n_tau)?;
                    Ok(MaturitySlice { maturity: t, bundle, boundary })
                })
                .collect();
            let slices = slices?;
            slices
                .par_iter()
                .map(|slice| {
                    let mut row = Vec::with_capacity(request.strikes.len());
                    let psi_shared = if numerics.no_psi {
                        None
                    } else {
                        Some(assemble_kernel(
                            &slice.boundary,
                            &default_p_grid(slice.bundle.tau0(), numerics.n_p),
                            &slice.boundary.tau_grid,
                        )?)
                    };
                    let p_grid = default_p_grid(slice.bundle.tau0(), numerics.n_p);
                    for &k in &request.strikes {
                        let started = Instant::now();
                        let psi = match &psi_shared {
                            None => None,
                            Some(kernel) => {
                                solve_flux_for_strike(&slice.bundle, &slice.boundary, kernel, &p_grid, k, numerics)?
                            }
                        };
                        let report = match request.product {
                            Product::UpOutCall => price_barrier_uo_call(
                                &slice.bundle,
                                &slice.boundary,
                                psi.as_ref(),
                                request.spot,
                                k,
                                numerics,
                            )?,
                            _ => price_barrier_do_call(
                                curve,
                                &slice.bundle,
                                &slice.boundary,
                                psi.as_ref(),
                                request.spot,
                                k,
                                slice.maturity,
                                numerics,
                            )?,
                        };
                        row.push(SurfaceCell {
                            strike: k,
                            maturity: slice.maturity,
                            price: report.price,
                            method: "semi",
                            psi_share: report.psi_share,
                            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
                            solve_residual: report.solve_residual,
                        });
                    }
                    Ok(row)
                })
                .collect()
        }
        Product::EuropeanCall => request
            .maturities
            .par_iter()
            .map(|&t| {
                let mut row = Vec::with_capacity(request.strikes.len());
                for &k in &request.strikes {
                    let started = Instant::now();
                    let price = price_vanilla(curve, request.spot, k, t)?;
                    row.push(SurfaceCell {
                        strike: k,
                        maturity: t,
                        price,
                        method: "semi",
                        psi_share: 0.0,
                        runtime_ms: started.elapsed().as_secs_f64() * 1e3,
                        solve_residual: 0.0,
                    });
                }
                Ok(row)
            })
            .collect(),
        Product::AmericanCall => request
            .maturities
            .par_iter()
            .map(|&t| {
                let mut row = Vec::with_capacity(request.strikes.len());
                for &k in &request.strikes {
                    let started = Instant::now();
                    let report =
                        american_price_with_fallback(curve, request.spot, k, t, numerics)?;
                    row.push(SurfaceCell {
                        strike: k,
                        maturity: t,
                        price: report.price,
                        method: "semi",
                        psi_share: report.psi_share,
                        runtime_ms: started.elapsed().as_secs_f64() * 1e3,
                        solve_residual: report.solve_residual,
                    });
                }
                Ok(row)
            })
            .collect(),
    };
    Ok(PriceSurface { cells: cells?.into_iter().flatten().collect() })
}

/// Solve the barrier flux for one strike on a shared kernel. Strikes at
/// or above the payoff region produce a zero flux.
fn solve_flux_for_strike(
    bundle: &TransformBundle,
    boundary: &MovingBoundary,
    kernel: &nalgebra::DMatrix<f64>,
    p_grid: &[f64],
    strike: f64,
    numerics: &Numerics,
) -> Result<Option<FredholmSolution>> {
    let y0 = boundary.y_at_maturity();
    let mut f = nalgebra::DVector::zeros(p_grid.len());
    for (i, &p) in p_grid.iter().enumerate() {
        match rhs_f(bundle, strike, y0, p) {
            Ok(v) => f[i] = v,
            Err(PricingError::EmptyPayoffRegion { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(solve_psi(kernel, &f, numerics.lambda, numerics.smoothing, &boundary.tau_grid)?))
}

pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::termstructure::ExponentialParams;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn table1_curve() -> CoefficientCurve {
        CoefficientCurve::exponential(
            ExponentialParams { r0: 0.02, q0: 0.01, sigma0: 45.0, r_k: 0.1, sigma_k: 0.2 },
            1.0,
        )
        .unwrap()
    }

    fn table1_setup() -> (CoefficientCurve, TransformBundle, MovingBoundary) {
        let curve = table1_curve();
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let boundary = bundle.moving_boundary(90.0, 49).unwrap();
        (curve, bundle, boundary)
    }

    fn flat_curve(r: f64, q: f64, sigma: f64, horizon: f64) -> CoefficientCurve {
        CoefficientCurve::piecewise_constant(vec![0.0], vec![r], vec![q], vec![sigma], horizon)
            .unwrap()
    }

    #[test]
    fn terminal_condition_kink_and_degenerate_form() {
        let (_, bundle, boundary) = table1_setup();
        let tc = terminal_condition(&bundle, 60.0);
        assert_eq!(tc.eval(tc.k1), 0.0);
        assert_eq!(tc.eval(tc.k1 * 0.5), 0.0);
        // direct substitution at the upper end of the payoff support
        let y0 = boundary.y_at_maturity();
        let expected = (-bundle.int_w_total()).exp()
            * (y0 - tc.k1)
            * (-bundle.k_end() + bundle.a_end() * y0 * y0).exp();
        assert_relative_eq!(tc.eval(y0), expected, max_relative = 1e-12);

        // w = 0, f = 0 reduces to the plain payoff
        let flat = flat_curve(0.0, 0.0, 10.0, 1.0);
        let fb = TransformBundle::with_riccati(&flat, 201, RiccatiInit::QMinusR).unwrap();
        let ftc = terminal_condition(&fb, 30.0);
        for z in [10.0, 30.0, 42.0, 77.7] {
            assert_relative_eq!(ftc.eval(z), (z - 30.0f64).max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn barrier_price_monotone_in_spot_near_barrier() {
        let (_, bundle, boundary) = table1_setup();
        let numerics = Numerics::default();
        let p_hi = price_barrier_uo_call(&bundle, &boundary, None, 0.999 * 90.0, 60.0, &numerics)
            .unwrap()
            .price;
        let p_mid = price_barrier_uo_call(&bundle, &boundary, None, 0.9 * 90.0, 60.0, &numerics)
            .unwrap()
            .price;
        assert!(p_hi < p_mid);
        assert!(p_hi < 1e-4 * 60.0);
        assert!(matches!(
            price_barrier_uo_call(&bundle, &boundary, None, 90.0, 60.0, &numerics),
            Err(PricingError::BarrierBreached { .. })
        ));
    }

    #[test]
    fn barrier_price_decreasing_in_strike() {
        let (curve, bundle, boundary) = table1_setup();
        let numerics = Numerics::default();
        let mut last = f64::INFINITY;
        for k in [50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0] {
            let p = price_barrier_uo_call(&bundle, &boundary, None, 60.0, k, &numerics)
                .unwrap()
                .price;
            assert!(p < last, "price not decreasing at K = {k}");
            assert!(p <= price_vanilla(&curve, 60.0, k, 1.0).unwrap());
            last = p;
        }
    }

    #[test]
    fn vanilla_limits() {
        // sigma -> 0 collapses to the discounted deterministic payoff
        let curve = flat_curve(0.03, 0.01, 1e-9, 1.0);
        let p = price_vanilla(&curve, 100.0, 90.0, 1.0).unwrap();
        let expected = (-0.03f64).exp() * (100.0 * (0.02f64).exp() - 90.0);
        assert_relative_eq!(p, expected, max_relative = 1e-9);
        let otm = price_vanilla(&curve, 100.0, 120.0, 1.0).unwrap();
        assert_abs_diff_eq!(otm, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn do_call_parity_by_construction() {
        let (curve, bundle, boundary) = table1_setup();
        let numerics = Numerics::default();
        for k in [50.0, 65.0, 80.0] {
            let uo = price_barrier_uo_call(&bundle, &boundary, None, 60.0, k, &numerics)
                .unwrap()
                .price;
            let dao = price_barrier_do_call(
                &curve, &bundle, &boundary, None, 60.0, k, 1.0, &numerics,
            )
            .unwrap()
            .price;
            let van = price_vanilla(&curve, 60.0, k, 1.0).unwrap();
            assert_relative_eq!(dao + uo, van, max_relative = 1e-12);
        }
    }

    #[test]
    fn do_call_vanishes_when_barrier_irrelevant() {
        // huge barrier: the up-and-out leg converges to the vanilla
        let curve = flat_curve(0.01, 0.0, 4.0, 1.0);
        let strike = 60.0;
        let barrier = 100.0 * strike;
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let boundary = bundle.moving_boundary(barrier, 49).unwrap();
        let numerics = Numerics::default();
        let dao = price_barrier_do_call(
            &curve, &bundle, &boundary, None, 60.0, strike, 1.0, &numerics,
        )
        .unwrap()
        .price;
        let van = price_vanilla(&curve, 60.0, strike, 1.0).unwrap();
        assert!(dao < 2e-3 * van, "dao {dao} not negligible against {van}");
    }

    #[test]
    fn uo_approaches_vanilla_for_tiny_vol_and_far_barrier() {
        let curve = flat_curve(0.01, 0.0, 2.0, 1.0);
        let strike = 50.0;
        let bundle = TransformBundle::with_riccati(&curve, 2001, RiccatiInit::QMinusR).unwrap();
        let boundary = bundle.moving_boundary(10.0 * strike, 49).unwrap();
        let numerics = Numerics::default();
        let uo = price_barrier_uo_call(&bundle, &boundary, None, 60.0, strike, &numerics)
            .unwrap()
            .price;
        let van = price_vanilla(&curve, 60.0, strike, 1.0).unwrap();
        assert_relative_eq!(uo, van, max_relative = 1e-3);
    }

    #[test]
    fn reconstruction_vanishes_on_both_boundaries() {
        let (_, bundle, boundary) = table1_setup();
        let numerics = Numerics::default();
        let tau0 = bundle.tau0();
        let y_obs = boundary.y_at(tau0);
        let tc = terminal_condition(&bundle, 60.0);
        let max_payoff = tc.eval(boundary.y_at_maturity());
        for x in [0.0, y_obs] {
            let (u, _) =
                reconstruct_u_barrier(&bundle, &boundary, None, 60.0, x, &numerics).unwrap();
            assert!(u.abs() <= 1e-8 * max_payoff, "u({x}) = {u}");
        }
    }

    #[test]
    fn surface_runs_and_orders_cells() {
        let curve = table1_curve();
        let req = LatticeRequest {
            product: Product::UpOutCall,
            spot: 60.0,
            barrier: Some(90.0),
            strikes: vec![50.0, 60.0, 70.0],
            maturities: vec![0.5, 1.0],
        };
        let surface = price_surface_semi(&curve, &req, &Numerics::default()).unwrap();
        assert_eq!(surface.cells.len(), 6);
        assert_eq!(surface.cells[0].maturity, 0.5);
        assert_eq!(surface.cells[3].maturity, 1.0);
        assert!(surface.cells.iter().all(|c| c.price >= 0.0));
        let mut csv = Vec::new();
        surface.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("K,T,price,method,psi_share,runtime_ms\n"));
    }

    #[test]
    fn empty_strike_list_rejected() {
        let curve = table1_curve();
        let req = LatticeRequest {
            product: Product::UpOutCall,
            spot: 60.0,
            barrier: Some(90.0),
            strikes: vec![],
            maturities: vec![1.0],
        };
        assert!(price_surface_semi(&curve, &req, &Numerics::default()).is_err());
    }
}

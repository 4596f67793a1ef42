//! Quadrature building blocks: composite Simpson rules, adaptive
//! Gauss-Kronrod integration and Gauss-Legendre nodes.

use crate::error::{PricingError, Result};
use std::sync::OnceLock;

/// Composite Simpson integral of samples on a uniform grid.
///
/// Requires an odd number of nodes (even interval count). The trailing
/// interval of an even-sized input is handled with a three-point rule so
/// callers never silently lose mass.
pub fn simpson_uniform(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    assert!(n >= 2, "simpson_uniform needs at least two samples");
    let mut total = 0.0;
    let pairs = (n - 1) / 2;
    for m in 0..pairs {
        let i = 2 * m;
        total += h / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
    }
    if (n - 1) % 2 == 1 {
        // last interval via the quadratic through the final three nodes
        let f0 = values[n - 3];
        let f1 = values[n - 2];
        let f2 = values[n - 1];
        total += h / 12.0 * (-f0 + 8.0 * f1 + 5.0 * f2);
    }
    total
}

/// Cumulative integral of samples on a uniform grid.
///
/// `out[i]` approximates the integral from the first node to node `i`.
/// Even indices use composite Simpson; odd indices add the integral of the
/// local three-point quadratic over the half pair, keeping O(h^4) accuracy
/// at every node.
pub fn cumulative_uniform(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "cumulative_uniform needs an odd node count >= 3");
    let mut out = vec![0.0; n];
    for i in (2..n).step_by(2) {
        out[i] = out[i - 2] + h / 3.0 * (values[i - 2] + 4.0 * values[i - 1] + values[i]);
    }
    for i in (1..n).step_by(2) {
        // integral over [t_{i-1}, t_i] of the quadratic through i-1, i, i+1
        out[i] = out[i - 1] + h / 12.0 * (5.0 * values[i - 1] + 8.0 * values[i] - values[i + 1]);
    }
    out
}

/// Composite Simpson weights for an odd-length uniform grid.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1, "simpson weights need an odd node count");
    let mut w = vec![0.0; n];
    for m in 0..(n - 1) / 2 {
        let i = 2 * m;
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
    }
    w
}

/// Trapezoid weights for an arbitrary strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    assert!(n >= 2);
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let half = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

// 15-point Kronrod extension of the 7-point Gauss rule (positive abscissae).
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = hl * XGK[j];
        let fsum = f(c - x) + f(c + x);
        kron += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    (kron * hl, (kron - gauss).abs() * hl)
}

/// Single non-adaptive 15-point Kronrod panel on [a, b]. Near machine
/// precision for smooth integrands on short panels.
pub fn gk15_value<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    gk15(f, a, b).0
}

/// Adaptive Gauss-Kronrod integration on [a, b].
///
/// Bisects until the local error estimate satisfies the relative tolerance
/// (with absolute floor 1e-14) or the node budget is exhausted.
pub fn adaptive_gk<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    const ABS_FLOOR: f64 = 1e-14;
    const MAX_INTERVALS: usize = 4096;

    if a == b {
        return Ok(0.0);
    }
    let (mut total, err0) = gk15(f, a, b);
    let mut stack = vec![(a, b, total, err0)];
    let mut done = 0.0_f64;
    let mut used = 1usize;

    while let Some((lo, hi, est, err)) = stack.pop() {
        let tol_here = (rel_tol * total.abs()).max(ABS_FLOOR) * (hi - lo) / (b - a);
        if err <= tol_here || err <= ABS_FLOOR {
            done += est;
            continue;
        }
        if used >= MAX_INTERVALS {
            return Err(PricingError::QuadratureFailure {
                detail: format!("node budget exhausted on [{lo:.6e}, {hi:.6e}], err {err:.3e}"),
            });
        }
        used += 1;
        let mid = 0.5 * (lo + hi);
        let (il, el) = gk15(f, lo, mid);
        let (ir, er) = gk15(f, mid, hi);
        // refresh the running total with the improved estimate
        total += il + ir - est;
        stack.push((lo, mid, il, el));
        stack.push((mid, hi, ir, er));
    }
    Ok(done)
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached 64-point Gauss-Legendre rule mapped to [0, 1].
pub fn gl64_unit() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_legendre(64);
        let nodes = x.iter().map(|t| 0.5 * (t + 1.0)).collect();
        let weights = w.iter().map(|t| 0.5 * t).collect();
        (nodes, weights)
    })
}

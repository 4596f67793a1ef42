// Manufactured verification of the lifted transform identity:
// u(x,tau) = G(x - c, tau + t0) - G(x + c, tau + t0) solves the heat
// equation with u(0, tau) = 0. Any boundary curve y(tau) then provides
// data psi1 = u(y, tau), Psi = u_x(y, tau), and the identity
//   int_0^inf e^{-ps}[Psi_W sinh(y rp) - P' J(y, p)] ds
//     = -int_0^{y(0)} u0 sinh(z rp) dz + P(0) J(y(0), p)
// must hold for Re p > 0.
fn g(d: f64, v: f64) -> f64 { (-d * d / (4.0 * v)).exp() / (4.0 * std::f64::consts::PI * v).sqrt() }
fn gx(d: f64, v: f64) -> f64 { -d / (2.0 * v) * g(d, v) }
fn gv(d: f64, v: f64) -> f64 { (d * d / (4.0 * v * v) - 0.5 / v) * g(d, v) }

const C: f64 = 30.0;
const T0: f64 = 120.0;

fn u(x: f64, tau: f64) -> f64 { g(x - C, tau + T0) - g(x + C, tau + T0) }
fn ux(x: f64, tau: f64) -> f64 { gx(x - C, tau + T0) - gx(x + C, tau + T0) }
fn utau(x: f64, tau: f64) -> f64 { gv(x - C, tau + T0) - gv(x + C, tau + T0) }

fn y_of(tau: f64) -> f64 { 70.0 + 0.05 * tau }
fn yp(_tau: f64) -> f64 { 0.05 }

fn j_kern(yv: f64, p: f64) -> f64 {
    let rp = p.sqrt();
    let a = yv * rp;
    (a * a.cosh() - a.sinh()) / p
}

fn quad<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    // composite Simpson, n odd
    let h = (b - a) / (n - 1) as f64;
    let mut s = 0.0;
    for m in 0..(n - 1) / 2 {
        let i = 2 * m;
        s += h / 3.0 * (f(a + i as f64 * h) + 4.0 * f(a + (i + 1) as f64 * h) + f(a + (i + 2) as f64 * h));
    }
    s
}

fn main() {
    let tau_end = 4000.0; // effectively infinity for e^{-p s}
    for &p in &[0.01f64, 0.03, 0.1, 0.3] {
        let rp = p.sqrt();
        let lhs = quad(|s: f64| {
            let yv = y_of(s);
            let psi1 = u(yv, s);
            let flux = ux(yv, s);
            let pv = psi1 / yv;
            // P'(s) analytically
            let psi1p = ux(yv, s) * yp(s) + utau(yv, s);
            let ppr = (psi1p * yv - psi1 * yp(s)) / (yv * yv);
            (-p * s).exp() * ((flux - pv) * (yv * rp).sinh() - ppr * j_kern(yv, p))
        }, 0.0, tau_end, 160001);
        let rhs_int = quad(|z: f64| u(z, 0.0) * (z * rp).sinh(), 0.0, y_of(0.0), 40001);
        let p0 = u(y_of(0.0), 0.0) / y_of(0.0);
        let rhs = -rhs_int + p0 * j_kern(y_of(0.0), p);
        println!("p={p:5.3}: lhs={lhs:14.6e} rhs={rhs:14.6e} rel={:.2e}", (lhs - rhs).abs() / rhs.abs().max(1e-300));
    }
}

//! Oscillating boundary test functions
//! `ψ_ε(t, x) = conj(e^{iθ̃/ε}) χ_ψ(t, x)` with
//! `θ̃ = q·(x − μ(t)) + i|x − μ(t)|²` and `μ(t) = (t − s)η + y`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{MetricField, Vec2};
use crate::smooth::plateau;

/// Inwardness floor `(ν, η) ≥ 0.1`.
pub const INWARD_FLOOR: f64 = 0.1;

/// Boundary pass point `pt = (s, y, η)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassPoint {
    pub s: f64,
    pub y: Vec2,
    pub eta: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunction {
    pub s: f64,
    pub y: Vec2,
    pub eta: Vec2,
    /// `q = η^♭`.
    pub q: Vec2,
    pub r_t: f64,
    pub r_x: f64,
}

/// Times `τ ≠ 0` at which the line `y + τη` meets the circle `∂M`.
fn other_crossings(metric: &MetricField, y: Vec2, eta: Vec2) -> Vec<f64> {
    // |y − c + τη|² = R² with y on the circle: τ(τ|η|² + 2(y − c)·η) = 0
    let d = y - metric.domain.center;
    let tau = -2.0 * d.dot(&eta) / eta.norm_squared();
    if tau.abs() > 1e-14 {
        vec![tau]
    } else {
        Vec::new()
    }
}

/// Build `ψ` for `pt` inside the window `(1, t_window)`. The time support
/// is `|t − s| < r_t`, the space support `|x − y| < r_x`.
pub fn make_test(metric: &MetricField, pt: PassPoint, t_window: f64, r_t: f64, r_x: f64) -> Result<TestFunction> {
    let disk = &metric.domain;
    if disk.level(pt.y).abs() > 1e-9 * disk.radius {
        return Err(Error::Invalid("y must lie on the boundary".into()));
    }
    let eta = pt.eta / metric.norm(pt.y, pt.eta);
    let inward = disk.inward_normal(pt.y).dot(&eta) * metric.a(pt.y).sqrt();
    if inward < INWARD_FLOOR {
        return Err(Error::Grazing { inwardness: inward });
    }
    if pt.s <= 1.0 + r_t || pt.s >= t_window - r_t {
        return Err(Error::PassTimeOutOfRange { s: pt.s });
    }
    let mut r_t = r_t;
    let clash = |r: f64| other_crossings(metric, pt.y, eta).iter().any(|&tau| tau.abs() < r);
    if clash(r_t) {
        r_t *= 0.5;
        if clash(r_t) {
            return Err(Error::MultiCross);
        }
    }
    Ok(TestFunction { s: pt.s, y: pt.y, eta, q: eta * metric.a(pt.y), r_t, r_x })
}

impl TestFunction {
    pub fn mu(&self, t: f64) -> Vec2 {
        self.y + self.eta * (t - self.s)
    }

    /// `χ_ψ(t, x)`: plateau in time and in distance from `y`, equal to 1 on
    /// the inner halves of the supports.
    pub fn cutoff(&self, t: f64, x: Vec2) -> f64 {
        plateau((t - self.s).abs(), 0.5 * self.r_t, self.r_t) * plateau((x - self.y).norm(), 0.5 * self.r_x, self.r_x)
    }

    /// Time support `[s − r_t, s + r_t]`.
    pub fn time_support(&self) -> (f64, f64) {
        (self.s - self.r_t, self.s + self.r_t)
    }

    /// Shift by `j` windows of length `t_window`: `ψ^j(t, x) = ψ(t − j·T, x)`.
    pub fn shifted(&self, t_shift: f64) -> TestFunction {
        TestFunction { s: self.s + t_shift, ..*self }
    }
}

/// `ψ_ε(t, x)`.
pub fn eval_test(tf: &TestFunction, t: f64, x: Vec2, eps: f64) -> Complex64 {
    eval_test_signed(tf, t, x, eps, 1.0)
}

/// `ψ_ε` with the real phase multiplied by `sign`; `sign = −1` gives `conj ψ_ε`.
pub fn eval_test_signed(tf: &TestFunction, t: f64, x: Vec2, eps: f64, sign: f64) -> Complex64 {
    let cut = tf.cutoff(t, x);
    if cut == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let d = x - tf.mu(t);
    cut * Complex64::new(-d.norm_squared() / eps, -sign * tf.q.dot(&d) / eps).exp()
}

/// Trapezoid quadrature of `f(t, arclength)` over `[t0, t1] × ∂M` restricted
/// to an arclength window `[s0, s1]`.
pub fn boundary_integral<F>(metric: &MetricField, t: (f64, f64), arc: (f64, f64), n_t: usize, n_s: usize, f: F) -> Complex64
where
    F: Fn(f64, f64, Vec2) -> Complex64,
{
    let (dt, ds) = ((t.1 - t.0) / n_t as f64, (arc.1 - arc.0) / n_s as f64);
    let mut sum = Complex64::new(0.0, 0.0);
    for i in 0..=n_t {
        let wt = if i == 0 || i == n_t { 0.5 } else { 1.0 };
        let ti = t.0 + dt * i as f64;
        for k in 0..=n_s {
            let wk = if k == 0 || k == n_s { 0.5 } else { 1.0 };
            let sk = arc.0 + ds * k as f64;
            let x = metric.domain.boundary_point(sk);
            // dS = sqrt(a)·dℓ for g = a·δ
            sum += f(ti, sk, x) * (wt * wk * metric.a(x).sqrt());
        }
    }
    sum * (dt * ds)
}

/// `‖ψ_ε‖²_{L²((0,T)×∂M)}`, and the fraction of it within distance `radius`
/// of `(s, y)` in `(t, x)`.
pub fn boundary_mass(metric: &MetricField, tf: &TestFunction, eps: f64, radius: f64) -> (f64, f64) {
    let arc_y = metric.domain.arc_length_of(tf.y);
    let h = eps.sqrt() / 12.0;
    let span = tf.r_x.min(metric.domain.circumference() / 2.0);
    let (n_t, n_s) = ((2.0 * tf.r_t / h).ceil() as usize, (2.0 * span / h).ceil() as usize);
    let rng_t = tf.time_support();
    let total = boundary_integral(metric, rng_t, (arc_y - span, arc_y + span), n_t, n_s, |t, _, x| {
        Complex64::from(eval_test(tf, t, x, eps).norm_sqr())
    });
    let near = boundary_integral(metric, rng_t, (arc_y - span, arc_y + span), n_t, n_s, |t, _, x| {
        if ((t - tf.s).powi(2) + (x - tf.y).norm_squared()).sqrt() <= radius {
            Complex64::from(eval_test(tf, t, x, eps).norm_sqr())
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    (total.re, near.re / total.re)
}

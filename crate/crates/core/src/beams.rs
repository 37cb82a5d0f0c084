//! Formal Gaussian beams `U_ε = χ_U·e^{iθ/ε}·u₀` along geodesics of `g = a·δ`.
//!
//! The phase is the second-order Taylor polynomial
//! `θ(t, x) = p(t)·(x − γ(t)) + ½ (x − γ(t))ᵀ H(t) (x − γ(t))`.
//! With the first-order Hamiltonian `𝓗(x, p) = |p|·a(x)^{-1/2}` the eikonal
//! equation `θ_t + 𝓗(x, ∇θ) = 0` matched to second order along the ray gives
//! the Riccati equation
//!
//! ```text
//! Ḣ + 𝓗_xx + 𝓗_xp H + H 𝓗_px + H 𝓗_pp H = 0,
//! ```
//!
//! which is integrated through the linear variational system
//! `Ż = 𝓗_px Z + 𝓗_pp Y`, `Ẏ = −𝓗_xx Z − 𝓗_xp Y`, `H = Y Z⁻¹`.
//!
//! The order-`ε⁻¹` term of `(∂_t² − a⁻¹Δ) U_ε` gives the transport equation
//! along the ray,
//!
//! ```text
//! d/dt log u₀ = ½ (θ_tt − a⁻¹ tr H),   θ_tt = −2 ṗ·γ̇ − p·γ̈ + γ̇ᵀ H γ̇,
//! ```
//!
//! and `u₀` is extended constantly off the ray.

use std::fmt::Write as _;

use nalgebra::Matrix2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{exit_time, GeodesicOptions, MetricField, PhasePoint, Vec2};
use crate::smooth::plateau;
use crate::wavesolver::{Grid, SnapshotPair};

pub type CMat2 = Matrix2<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Beam end point `pgb = (T, z, ζ)`: the beam arrives at `z` at time `T`
/// moving in direction `−ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamAnchor {
    pub t_end: f64,
    pub z: Vec2,
    pub zeta: Vec2,
}

/// Tunables for beam construction.
#[derive(Debug, Clone, Copy)]
pub struct BeamOptions {
    /// RK4 step for the ray/Riccati/transport system.
    pub dt: f64,
    /// Earliest time the phase is stored for.
    pub t_start: f64,
    /// Extra time stored after `T` (for two-level initial data).
    pub t_after: f64,
    /// Largest ε the tube radius has to accommodate.
    pub eps_max: f64,
    /// Negative control: keep `H(t) ≡ H(T)` instead of solving the Riccati equation.
    pub freeze_hessian: bool,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { dt: 2e-3, t_start: 0.0, t_after: 0.25, eps_max: 0.08, freeze_hessian: false }
    }
}

/// One stored point of the ray with its phase and amplitude data, plus the
/// time derivatives used for Hermite interpolation.
#[derive(Debug, Clone, Copy)]
struct Knot {
    x: Vec2,
    p: Vec2,
    h: CMat2,
    log_u0: Complex64,
    dx: Vec2,
    dp: Vec2,
    dh: CMat2,
    dlog_u0: Complex64,
    det_z: Complex64,
    sym_defect: f64,
}

/// Ray, covector and complex Hessian of the phase, tabulated in time.
#[derive(Debug, Clone)]
pub struct BeamPhase {
    t0: f64,
    dt: f64,
    knots: Vec<Knot>,
    /// Phase Taylor order (always 2 here).
    pub order: usize,
}

/// Ray position, covector, Hessian and amplitude at one time.
#[derive(Debug, Clone, Copy)]
pub struct BeamFrame {
    pub t: f64,
    pub gamma: Vec2,
    pub p: Vec2,
    pub h: CMat2,
    pub u0: Complex64,
}

fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, s: f64, dt: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * dt * d0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * dt * d1
}

fn hermite_c(y0: Complex64, d0: Complex64, y1: Complex64, d1: Complex64, s: f64, dt: f64) -> Complex64 {
    Complex64::new(
        hermite(y0.re, d0.re, y1.re, d1.re, s, dt),
        hermite(y0.im, d0.im, y1.im, d1.im, s, dt),
    )
}

impl BeamPhase {
    pub fn t_range(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.dt * (self.knots.len() - 1) as f64)
    }

    /// Interpolated frame at time `t` (clamped to the stored range).
    pub fn frame(&self, t: f64) -> BeamFrame {
        let n = self.knots.len();
        let u = ((t - self.t0) / self.dt).clamp(0.0, (n - 1) as f64);
        let k = (u.floor() as usize).min(n - 2);
        let s = u - k as f64;
        let (a, b) = (&self.knots[k], &self.knots[k + 1]);
        let dt = self.dt;
        let v = |ya: Vec2, da: Vec2, yb: Vec2, db: Vec2| {
            Vec2::new(hermite(ya.x, da.x, yb.x, db.x, s, dt), hermite(ya.y, da.y, yb.y, db.y, s, dt))
        };
        let mut h = CMat2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                h[(i, j)] = hermite_c(a.h[(i, j)], a.dh[(i, j)], b.h[(i, j)], b.dh[(i, j)], s, dt);
            }
        }
        let log_u0 = hermite_c(a.log_u0, a.dlog_u0, b.log_u0, b.dlog_u0, s, dt);
        BeamFrame {
            t,
            gamma: v(a.x, a.dx, b.x, b.dx),
            p: v(a.p, a.dp, b.p, b.dp),
            h,
            u0: log_u0.exp(),
        }
    }

    /// Stored samples `(t, H(t), u0(t), det Z(t))`.
    pub fn samples(&self) -> impl Iterator<Item = (f64, CMat2, Complex64, Complex64)> + '_ {
        self.knots
            .iter()
            .enumerate()
            .map(move |(k, kn)| (self.t0 + k as f64 * self.dt, kn.h, kn.log_u0.exp(), kn.det_z))
    }

    /// Largest relative symmetry defect of `Y Z⁻¹` before symmetrization.
    pub fn max_symmetry_defect(&self) -> f64 {
        self.knots.iter().map(|k| k.sym_defect).fold(0.0, f64::max)
    }

    /// Stored `(t, γ(t), p(t))`.
    pub fn ray(&self) -> impl Iterator<Item = (f64, Vec2, Vec2)> + '_ {
        self.knots.iter().enumerate().map(move |(k, kn)| (self.t0 + k as f64 * self.dt, kn.x, kn.p))
    }
}

/// Eigenvalues (ascending) of the imaginary part of a complex symmetric matrix.
pub fn im_eigenvalues(h: &CMat2) -> [f64; 2] {
    let (a, b, c) = (h[(0, 0)].im, 0.5 * (h[(0, 1)].im + h[(1, 0)].im), h[(1, 1)].im);
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    [m - r, m + r]
}

/// Full state of the coupled ray / variational / transport system.
#[derive(Debug, Clone, Copy)]
struct BeamState {
    x: Vec2,
    p: Vec2,
    y: CMat2,
    z: CMat2,
    log_u0: Complex64,
}

impl BeamState {
    fn axpy(&self, h: f64, d: &BeamState) -> BeamState {
        BeamState {
            x: self.x + d.x * h,
            p: self.p + d.p * h,
            y: self.y + d.y * Complex64::from(h),
            z: self.z + d.z * Complex64::from(h),
            log_u0: self.log_u0 + d.log_u0 * h,
        }
    }
}

struct HamiltonianJet {
    dx: Vec2,
    dp: Vec2,
    h_xx: Matrix2<f64>,
    h_xp: Matrix2<f64>,
    h_pp: Matrix2<f64>,
    a: f64,
}

fn hamiltonian_jet(metric: &MetricField, x: Vec2, p: Vec2) -> HamiltonianJet {
    let j = metric.jet(x);
    // b = a^{-1/2}
    let b = j.a.powf(-0.5);
    let grad_b = j.grad * (-0.5 * j.a.powf(-1.5));
    let hess_b = j.hess * (-0.5 * j.a.powf(-1.5)) + (j.grad * j.grad.transpose()) * (0.75 * j.a.powf(-2.5));
    let pn = p.norm();
    let phat = p / pn;
    HamiltonianJet {
        dx: phat * b,
        dp: -grad_b * pn,
        h_xx: hess_b * pn,
        // (𝓗_xp)_{ik} = ∂_i b · p̂_k
        h_xp: grad_b * phat.transpose(),
        h_pp: (Matrix2::identity() - phat * phat.transpose()) * (b / pn),
        a: j.a,
    }
}

fn to_c(m: &Matrix2<f64>) -> CMat2 {
    m.map(Complex64::from)
}

fn rhs(metric: &MetricField, s: &BeamState, freeze: bool) -> (BeamState, CMat2, CMat2) {
    let hj = hamiltonian_jet(metric, s.x, s.p);
    let (h_xx, h_xp, h_px, h_pp) = (to_c(&hj.h_xx), to_c(&hj.h_xp), to_c(&hj.h_xp.transpose()), to_c(&hj.h_pp));
    let (dz, dy) = if freeze {
        (CMat2::zeros(), CMat2::zeros())
    } else {
        (h_px * s.z + h_pp * s.y, -(h_xx * s.z) - h_xp * s.y)
    };
    let h = s.y * s.z.try_inverse().unwrap_or_else(CMat2::zeros);
    let dh = if freeze { CMat2::zeros() } else { -(h_xx + h_xp * h + h * h_px + h * h_pp * h) };
    // γ̈ = 𝓗_px γ̇ + 𝓗_pp ṗ
    let gdd = hj.h_xp.transpose() * hj.dx + hj.h_pp * hj.dp;
    let gd = hj.dx.map(Complex64::from);
    let theta_tt = Complex64::from(-2.0 * hj.dp.dot(&hj.dx) - s.p.dot(&gdd)) + (gd.transpose() * h * gd)[(0, 0)];
    let dlog = 0.5 * (theta_tt - h.trace() / hj.a);
    (BeamState { x: hj.dx, p: hj.dp, y: dy, z: dz, log_u0: dlog }, h, dh)
}

fn rk4(metric: &MetricField, s: &BeamState, h: f64, freeze: bool) -> BeamState {
    let k1 = rhs(metric, s, freeze).0;
    let k2 = rhs(metric, &s.axpy(0.5 * h, &k1), freeze).0;
    let k3 = rhs(metric, &s.axpy(0.5 * h, &k2), freeze).0;
    let k4 = rhs(metric, &s.axpy(h, &k3), freeze).0;
    let mut out = *s;
    let c = |a: f64, b: f64, cc: f64, d: f64| h / 6.0 * (a + 2.0 * b + 2.0 * cc + d);
    out.x += (k1.x + k2.x * 2.0 + k3.x * 2.0 + k4.x) * (h / 6.0);
    out.p += (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (h / 6.0);
    let hc = Complex64::from(h / 6.0);
    out.y += (k1.y + k2.y * Complex64::from(2.0) + k3.y * Complex64::from(2.0) + k4.y) * hc;
    out.z += (k1.z + k2.z * Complex64::from(2.0) + k3.z * Complex64::from(2.0) + k4.z) * hc;
    out.log_u0 += Complex64::new(
        c(k1.log_u0.re, k2.log_u0.re, k3.log_u0.re, k4.log_u0.re),
        c(k1.log_u0.im, k2.log_u0.im, k3.log_u0.im, k4.log_u0.im),
    );
    out
}

fn knot(metric: &MetricField, s: &BeamState, freeze: bool) -> Knot {
    let (d, h, dh) = rhs(metric, s, freeze);
    // Y Z⁻¹ is symmetric in exact arithmetic; drop the roundoff part
    let half = Complex64::from(0.5);
    Knot {
        x: s.x,
        p: s.p,
        h: (h + h.transpose()) * half,
        sym_defect: (h - h.transpose()).norm() / h.norm(),
        log_u0: s.log_u0,
        dx: d.x,
        dp: d.p,
        dh: (dh + dh.transpose()) * half,
        dlog_u0: d.log_u0,
        det_z: s.z.determinant(),
    }
}

/// Integrate the beam system from `t_end` to `t_target` (either direction)
/// in steps of at most `dt`, returning knots ordered by increasing time.
fn integrate(
    metric: &MetricField,
    start: BeamState,
    t_end: f64,
    t_target: f64,
    dt: f64,
    freeze: bool,
) -> Result<Vec<Knot>> {
    let n = ((t_target - t_end).abs() / dt).round().max(1.0) as usize;
    let h = (t_target - t_end) / n as f64;
    let mut s = start;
    let mut knots = Vec::with_capacity(n + 1);
    knots.push(knot(metric, &s, freeze));
    for k in 1..=n {
        s = rk4(metric, &s, h, freeze);
        let t = t_end + h * k as f64;
        let det = s.z.determinant().norm();
        if det < 1e-12 {
            return Err(Error::DegenerateZ { det, t });
        }
        let amp = s.log_u0.re.exp();
        if amp < 1e-12 {
            return Err(Error::AmplitudeUnderflow { value: amp, t });
        }
        knots.push(knot(metric, &s, freeze));
    }
    if h < 0.0 {
        knots.reverse();
    }
    Ok(knots)
}

/// Where the beam ray meets `∂M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamCrossings {
    /// Travel time from `z` (along `ζ`) to the first hit of `∂M`.
    pub r: f64,
    /// Travel time through `M`.
    pub tau: f64,
    /// Inward phase point where the ray from `z` enters `M`: `(x, ξ)`.
    pub entry_from_anchor: PhasePoint,
    /// Time at which `γ_U` enters `M` (= T − r − τ).
    pub t_in: f64,
    /// Time at which `γ_U` leaves `M` (= T − r).
    pub t_out: f64,
}

/// A formal Gaussian beam of order `N_U = 2`.
#[derive(Debug, Clone)]
pub struct GaussianBeam {
    pub anchor: BeamAnchor,
    pub phase: BeamPhase,
    pub crossings: BeamCrossings,
    /// Positivity constant: `Im θ ≥ β_θ |x − γ(t)|²` on the tube over `[0, T]`.
    pub beta_theta: f64,
    pub order: usize,
    pub eps_max: f64,
    pub h_end: CMat2,
    pub options: BeamOptions,
    metric: MetricField,
}

/// First entry of the straight exterior ray `z + s·ζ` into the disk.
fn exterior_entry(metric: &MetricField, z: Vec2, zeta: Vec2) -> Option<f64> {
    let d = z - metric.domain.center;
    let dir = zeta.normalize();
    let b = d.dot(&dir);
    let disc = b * b - (d.norm_squared() - metric.domain.radius.powi(2));
    if b >= 0.0 || disc <= 1e-12 {
        return None;
    }
    Some((-b - disc.sqrt()) / zeta.norm())
}

/// Anchor the beam at `pgb` with Hessian `H(T)` and propagate phase and
/// amplitude over `[t_start, T + t_after]`.
pub fn init_beam(metric: &MetricField, anchor: BeamAnchor, h_end: CMat2, opts: &BeamOptions) -> Result<GaussianBeam> {
    if metric.domain.contains(anchor.z) {
        return Err(Error::Invalid("beam anchor must lie outside M".into()));
    }
    if ((h_end - h_end.transpose()).norm()) > 1e-14 || im_eigenvalues(&h_end)[0] <= 0.0 {
        return Err(Error::Invalid("H(T) must be symmetric with Im H > 0".into()));
    }
    let zeta = anchor.zeta / metric.norm(anchor.z, anchor.zeta);
    let r = exterior_entry(metric, anchor.z, zeta).ok_or(Error::MissesM)?;
    let x_in = anchor.z + zeta * r;
    let entry = PhasePoint::unit(metric, x_in, zeta);
    let gopts = GeodesicOptions::for_domain(&metric.domain, 1e-3);
    let tau = exit_time(metric, &entry, &gopts)?;
    let crossings = BeamCrossings {
        r,
        tau,
        entry_from_anchor: entry,
        t_in: anchor.t_end - r - tau,
        t_out: anchor.t_end - r,
    };

    let a_z = metric.a(anchor.z);
    let start = BeamState {
        x: anchor.z,
        p: -zeta * a_z,
        y: h_end,
        z: CMat2::identity(),
        log_u0: Complex64::new(0.0, 0.0),
    };
    let backward = integrate(metric, start, anchor.t_end, opts.t_start, opts.dt, opts.freeze_hessian)?;
    // continue past T on the same step so one uniform table covers both sides
    let step = (anchor.t_end - opts.t_start) / (backward.len() - 1) as f64;
    let mut knots = backward;
    let mut s = start;
    for _ in 0..(opts.t_after / step).ceil() as usize {
        s = rk4(metric, &s, step, opts.freeze_hessian);
        knots.push(knot(metric, &s, opts.freeze_hessian));
    }
    let phase = BeamPhase { t0: opts.t_start, dt: step, knots, order: 2 };

    let beta_theta = phase
        .samples()
        .filter(|(t, ..)| *t <= anchor.t_end + 1e-12 && *t >= 0.0)
        .map(|(_, h, ..)| 0.5 * im_eigenvalues(&h)[0])
        .fold(f64::INFINITY, f64::min);

    Ok(GaussianBeam {
        anchor,
        phase,
        crossings,
        beta_theta,
        order: 2,
        eps_max: opts.eps_max,
        h_end,
        options: *opts,
        metric: metric.clone(),
    })
}

/// Re-propagate the phase of `beam` with RK4 step `dt`.
pub fn propagate_phase(beam: &GaussianBeam, dt: f64) -> Result<BeamPhase> {
    let opts = BeamOptions { dt, ..beam.options };
    Ok(init_beam(&beam.metric, beam.anchor, beam.h_end, &opts)?.phase)
}

/// Principal amplitude `u₀` at the stored times, propagated with step `dt`.
pub fn propagate_amplitude(beam: &GaussianBeam, dt: f64) -> Result<Vec<(f64, Complex64)>> {
    Ok(propagate_phase(beam, dt)?.samples().map(|(t, _, u0, _)| (t, u0)).collect())
}

/// Default beam end Hessian `H(T) = i·I`.
pub fn default_end_hessian() -> CMat2 {
    CMat2::identity() * I
}

impl GaussianBeam {
    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    /// Tube radius at time `t`: `4·sqrt(ε_max/β(t))`, `β(t) = ½ λ_min(Im H(t))`.
    pub fn tube_radius(&self, frame: &BeamFrame) -> f64 {
        let beta = 0.5 * im_eigenvalues(&frame.h)[0];
        4.0 * (self.eps_max / beta).sqrt()
    }

    /// `(χ_U, θ)` at `(t, x)` for a precomputed frame.
    pub fn phase_at(&self, frame: &BeamFrame, x: Vec2) -> (f64, Complex64) {
        let rho = self.tube_radius(frame);
        let d = x - frame.gamma;
        let cut = plateau(d.norm(), 0.75 * rho, rho);
        if cut == 0.0 {
            return (0.0, Complex64::new(0.0, 0.0));
        }
        let dc = d.map(Complex64::from);
        let quad = (dc.transpose() * frame.h * dc)[(0, 0)];
        (cut, Complex64::from(frame.p.dot(&d)) + 0.5 * quad)
    }

    /// `U_ε(t, x) = χ_U e^{iθ/ε} u₀(t)`; zero outside the tube.
    pub fn eval(&self, t: f64, x: Vec2, eps: f64) -> Complex64 {
        let frame = self.phase.frame(t);
        self.eval_with_frame(&frame, x, eps)
    }

    pub fn eval_with_frame(&self, frame: &BeamFrame, x: Vec2, eps: f64) -> Complex64 {
        let (cut, theta) = self.phase_at(frame, x);
        if cut == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        cut * (I * theta / eps).exp() * frame.u0
    }

    /// `∇_x θ` at `(t, x)`.
    pub fn phase_gradient(&self, t: f64, x: Vec2) -> nalgebra::Vector2<Complex64> {
        let f = self.phase.frame(t);
        let d = (x - f.gamma).map(Complex64::from);
        f.p.map(Complex64::from) + f.h * d
    }

    /// Sup over the sampled tube of `|(∂_t² − a⁻¹Δ) U_ε|`, by fourth-order
    /// central differences with step `ε/12`. The radial samples cover the
    /// part of the tube where the beam is not negligible. Only the `k = 0` norm is
    /// implemented; `k` is accepted for the interface and must be 0.
    pub fn residual(&self, eps: f64, k: usize, times: &[f64], radial: usize, angular: usize) -> f64 {
        assert_eq!(k, 0, "only the C⁰ residual is sampled");
        let h = eps / 12.0;
        let mut worst: f64 = 0.0;
        for &t in times {
            let frame = self.phase.frame(t);
            // beyond 6 widths the beam is below e^{-36} of its peak
            let beta = 0.5 * im_eigenvalues(&frame.h)[0];
            let rho = (0.75 * self.tube_radius(&frame)).min(6.0 * (eps / beta).sqrt());
            let frames: Vec<BeamFrame> = (-2..=2).map(|m| self.phase.frame(t + m as f64 * h)).collect();
            let at = |m: i32, x: Vec2| self.eval_with_frame(&frames[(m + 2) as usize], x, eps);
            for ir in 0..radial {
                let rad = rho * ir as f64 / radial as f64;
                let n_ang = if ir == 0 { 1 } else { angular };
                for ia in 0..n_ang {
                    let ang = 2.0 * std::f64::consts::PI * ia as f64 / n_ang as f64;
                    let x = frame.gamma + rad * Vec2::new(ang.cos(), ang.sin());
                    let d2 = |f: &dyn Fn(f64) -> Complex64| {
                        (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h)
                    };
                    let u_tt = (-at(2, x) + 16.0 * at(1, x) - 30.0 * at(0, x) + 16.0 * at(-1, x) - at(-2, x))
                        / (12.0 * h * h);
                    let u_xx = d2(&|s| at(0, x + Vec2::new(s, 0.0)));
                    let u_yy = d2(&|s| at(0, x + Vec2::new(0.0, s)));
                    let res = u_tt - (u_xx + u_yy) / self.metric.a(x);
                    worst = worst.max(res.norm());
                }
            }
        }
        worst
    }

    /// Per-knot diagnostics CSV: `t, im_eig_min, im_eig_max, abs_u0, sym_defect`.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("t,im_eig_min,im_eig_max,abs_u0,sym_defect\n");
        for (k, (t, h, u0, _)) in self.phase.samples().enumerate() {
            let [lo, hi] = im_eigenvalues(&h);
            let _ = writeln!(out, "{t:.6},{lo:.9e},{hi:.9e},{:.9e},{:.3e}", u0.norm(), self.phase.knots[k].sym_defect);
        }
        out
    }
}

/// Initial data `(χ_U U_ε)(T)`, `(χ_U U_ε)(T + dt)` on the grid, real and
/// imaginary parts as separate snapshot pairs on the common support `Ω`.
#[derive(Debug, Clone)]
pub struct BeamInitialData {
    pub re: SnapshotPair,
    pub im: SnapshotPair,
    /// `dist(Ω, ∂M)`.
    pub distance: f64,
}

impl BeamInitialData {
    /// Full-grid fields `(w^N, w^{N+1})` of one component.
    pub fn levels(&self, grid: &Grid, imag: bool) -> (Vec<f64>, Vec<f64>) {
        let s = if imag { &self.im } else { &self.re };
        let mut w0 = vec![0.0; grid.len()];
        let mut w1 = vec![0.0; grid.len()];
        for (i, &k) in s.nodes.iter().enumerate() {
            w0[k] = s.u[i];
            w1[k] = s.u[i] + grid.dt * s.ut[i];
        }
        (w0, w1)
    }
}

/// Sample the beam at `T` and `T + dt` on `grid`.
pub fn beam_to_initial_data(beam: &GaussianBeam, eps: f64, grid: &Grid) -> Result<BeamInitialData> {
    let t = beam.anchor.t_end;
    let (f0, f1) = (beam.phase.frame(t), beam.phase.frame(t + grid.dt));
    let reach = beam.tube_radius(&f0).max(beam.tube_radius(&f1)) + grid.h();
    let mut nodes = Vec::new();
    let (mut v0, mut v1) = (Vec::new(), Vec::new());
    for k in 0..grid.len() {
        let x = grid.node(k);
        if (x - f0.gamma).norm() > reach {
            continue;
        }
        let (a, b) = (beam.eval_with_frame(&f0, x, eps), beam.eval_with_frame(&f1, x, eps));
        if a.norm() == 0.0 && b.norm() == 0.0 {
            continue;
        }
        nodes.push(k);
        v0.push(a);
        v1.push(b);
    }
    let disk = &grid.domain;
    let distance = nodes
        .iter()
        .map(|&k| (grid.node(k) - disk.center).norm() - disk.radius)
        .fold(f64::INFINITY, f64::min);
    if distance <= 0.0 {
        return Err(Error::SupportTouchesM { distance });
    }
    if nodes.iter().any(|&k| grid.sigma[k] != 0.0) {
        return Err(Error::SupportLeak);
    }
    let part = |f: fn(&Complex64) -> f64| SnapshotPair {
        t,
        nodes: nodes.clone(),
        u: v0.iter().map(f).collect(),
        ut: v0.iter().zip(&v1).map(|(a, b)| (f(b) - f(a)) / grid.dt).collect(),
    };
    Ok(BeamInitialData { re: part(|z| z.re), im: part(|z| z.im), distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bump;

    fn euclid_beam() -> GaussianBeam {
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(2.0, 0.0), zeta: Vec2::new(-1.0, 0.0) };
        init_beam(&MetricField::euclidean(), anchor, default_end_hessian(), &BeamOptions::default()).unwrap()
    }

    #[test]
    fn euclidean_entry_time() {
        let b = euclid_beam();
        assert!((b.crossings.r - 1.0).abs() < 1e-12);
        assert!((b.crossings.tau - 2.0).abs() < 1e-8);
        let f = b.phase.frame(5.0);
        assert!((f.gamma - Vec2::new(1.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn tangent_ray_misses() {
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(2.0, 0.0), zeta: Vec2::new(0.0, 1.0) };
        let err = init_beam(&MetricField::euclidean(), anchor, default_end_hessian(), &BeamOptions::default());
        assert!(matches!(err, Err(Error::MissesM)));
    }

    #[test]
    fn euclidean_transverse_riccati_closed_form() {
        // Ḣ⊥ + H⊥² = 0  ⇒  H⊥(t) = (H⊥(T)⁻¹ + (t − T))⁻¹; longitudinal entry stays i
        let b = euclid_beam();
        for (t, h, u0, _) in b.phase.samples() {
            let want = 1.0 / (1.0 / I + (t - 6.0));
            assert!((h[(1, 1)] - want).norm() < 1e-8, "t={t}");
            assert!((h[(0, 0)] - I).norm() < 1e-10);
            assert!(h[(0, 1)].norm() < 1e-12);
            // |u0| = (1 + (T − t)²)^{-1/4}
            let amp = (1.0 + (6.0 - t).powi(2)).powf(-0.25);
            assert!((u0.norm() - amp).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn phase_vanishes_on_ray_and_gradient_is_p() {
        let m = MetricField::with_bump(Bump::default_lens(0.2));
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(1.8, 0.3), zeta: Vec2::new(-1.0, -0.1) };
        let b = init_beam(&m, anchor, default_end_hessian(), &BeamOptions::default()).unwrap();
        for &t in &[3.0, 4.1, 5.5] {
            let f = b.phase.frame(t);
            let v = b.eval(t, f.gamma, 0.02);
            assert!((v - f.u0).norm() < 1e-12);
            let g = b.phase_gradient(t, f.gamma);
            assert!((g[0] - f.p.x).norm() < 1e-12 && (g[1] - f.p.y).norm() < 1e-12);
            // p = γ̇^♭ : unit g-covector
            assert!((f.p.norm() / m.a(f.gamma).sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn imaginary_part_stays_positive_and_symmetric() {
        let m = MetricField::with_bump(Bump::default_lens(0.3));
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(1.5, -0.4), zeta: Vec2::new(-1.0, 0.35) };
        let b = init_beam(&m, anchor, default_end_hessian(), &BeamOptions::default()).unwrap();
        for (_, h, u0, _) in b.phase.samples() {
            assert!(im_eigenvalues(&h)[0] > 0.0);
            assert!((h - h.transpose()).norm() < 1e-12);
            assert!(u0.norm() > 0.0);
        }
        assert!(b.beta_theta > 0.0);
    }

    #[test]
    fn bump_entry_matches_geodesic_trace() {
        let m = MetricField::with_bump(Bump::default_lens(0.2));
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(2.0, 0.3), zeta: Vec2::new(-1.0, -0.25) };
        let b = init_beam(&m, anchor, default_end_hessian(), &BeamOptions::default()).unwrap();
        let c = b.crossings;
        let start = PhasePoint::unit(&m, anchor.z, anchor.zeta);
        let trace = crate::geometry::geodesic_trace(&m, &start, 1e-4, c.r + 1e-3, 100_000).unwrap();
        let inside = trace.iter().position(|q| m.domain.contains(q.x)).unwrap();
        assert!((trace[inside].x - c.entry_from_anchor.x).norm() < 2e-4);
        // γ_U runs the same ray backwards
        let f = b.phase.frame(c.t_out);
        assert!((f.gamma - c.entry_from_anchor.x).norm() < 1e-8);
        let f = b.phase.frame(c.t_in);
        assert!((m.domain.level(f.gamma)).abs() < 1e-7);
    }

    #[test]
    fn amplitude_step_self_convergence() {
        let m = MetricField::with_bump(Bump::default_lens(0.2));
        let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(1.8, 0.3), zeta: Vec2::new(-1.0, -0.1) };
        let b = init_beam(&m, anchor, default_end_hessian(), &BeamOptions { dt: 0.02, ..Default::default() }).unwrap();
        let at0 = |dt: f64| propagate_amplitude(&b, dt).unwrap()[0].1;
        let (e1, e2) = ((at0(0.04) - at0(0.01)).norm(), (at0(0.02) - at0(0.01)).norm());
        // RK4: halving dt divides the error by ~16
        let ratio = e1 / (e2 * 16.0 / 15.0) ;
        assert!(ratio > 10.0, "ratio {ratio}");
    }

    #[test]
    fn outside_tube_is_zero() {
        let b = euclid_beam();
        assert_eq!(b.eval(5.0, Vec2::new(1.0, 30.0), 0.02), Complex64::new(0.0, 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn riccati_keeps_im_positive(re in proptest::array::uniform3(-2.0f64..2.0),
                                     l1 in 0.2f64..3.0, l2 in 0.2f64..3.0, ang in 0.0f64..3.14,
                                     aim in -0.3f64..0.3) {
            let (c, s) = (ang.cos(), ang.sin());
            let im = Matrix2::new(c, -s, s, c) * Matrix2::new(l1, 0.0, 0.0, l2) * Matrix2::new(c, s, -s, c);
            let mut h = CMat2::zeros();
            h[(0, 0)] = Complex64::new(re[0], im[(0, 0)]);
            h[(1, 1)] = Complex64::new(re[1], im[(1, 1)]);
            let off = Complex64::new(re[2], 0.5 * (im[(0, 1)] + im[(1, 0)]));
            h[(0, 1)] = off;
            h[(1, 0)] = off;
            let m = MetricField::with_bump(Bump::default_lens(0.2));
            let anchor = BeamAnchor { t_end: 6.0, z: Vec2::new(1.9, 0.0), zeta: Vec2::new(-1.0, aim) };
            let b = init_beam(&m, anchor, h, &BeamOptions { dt: 5e-3, ..Default::default() }).unwrap();
            proptest::prop_assert!(b.phase.max_symmetry_defect() < 1e-10);
            for (_, hh, _, _) in b.phase.samples() {
                proptest::prop_assert!(im_eigenvalues(&hh)[0] > 0.0);
                proptest::prop_assert!((hh - hh.transpose()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_envelope_bound() {
        let b = euclid_beam();
        let eps = 0.02;
        let f = b.phase.frame(4.5);
        for k in 0..20 {
            let x = f.gamma + Vec2::new(0.013 * k as f64, 0.021 * k as f64);
            let d2 = (x - f.gamma).norm_squared();
            assert!(b.eval(4.5, x, eps).norm() <= f.u0.norm() * (-b.beta_theta * d2 / eps).exp() + 1e-15);
        }
    }
}

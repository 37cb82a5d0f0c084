//! Conformally Euclidean metric on the plane, geodesic flow and the
//! scattering relation of a disk.
//!
//! The metric is `g = a(x)·δ` with
//! `a(x) = 1 + A·exp(-|x - x0|²/w²)·χ(|x - x0|)` where `χ` is a C^∞ cutoff
//! equal to one on `[0, r_in]` and zero beyond `r_out`. Outside the ball of
//! radius `r_out` around `x0` the metric is exactly Euclidean.
//!
//! Geodesics are integrated in Hamiltonian form, `H(x, p) = |p|²/(2a)`, with
//! classical RK4. On the unit sphere bundle `p = a·ξ` and the Hamiltonian
//! parameter is arc length.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::smooth::smooth_transition;

pub type Vec2 = Vector2<f64>;

/// Rotate a vector counterclockwise by `angle`.
pub fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Compactly supported Gaussian perturbation of the conformal factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub amplitude: f64,
    pub center: Vec2,
    pub width: f64,
    /// Radius (from `center`) where the cutoff starts.
    pub cutoff_inner: f64,
    /// Radius beyond which `a ≡ 1`.
    pub cutoff_outer: f64,
}

impl Bump {
    pub fn none() -> Self {
        Bump {
            amplitude: 0.0,
            center: Vec2::zeros(),
            width: 0.35,
            cutoff_inner: 0.45,
            cutoff_outer: 0.7,
        }
    }

    /// The default lens used throughout the experiments.
    pub fn default_lens(amplitude: f64) -> Self {
        Bump {
            amplitude,
            center: Vec2::new(0.15, -0.1),
            width: 0.35,
            cutoff_inner: 0.45,
            cutoff_outer: 0.7,
        }
    }

    /// Radial profile `φ(r) = exp(-r²/w²)·χ(r)` with `φ'` and `φ'/r`, `φ''`.
    fn profile(&self, r: f64) -> (f64, f64, f64, f64) {
        let w2 = self.width * self.width;
        let gauss = (-r * r / w2).exp();
        let g1 = -2.0 * r / w2 * gauss;
        let g2 = (4.0 * r * r / (w2 * w2) - 2.0 / w2) * gauss;
        let span = self.cutoff_outer - self.cutoff_inner;
        let [s, s1, s2] = smooth_transition((r - self.cutoff_inner) / span);
        let (c, c1, c2) = (1.0 - s, -s1 / span, -s2 / (span * span));
        let phi = gauss * c;
        let d1 = g1 * c + gauss * c1;
        let d2 = g2 * c + 2.0 * g1 * c1 + gauss * c2;
        // φ'/r without the 0/0 at the centre (c1 vanishes for r < cutoff_inner)
        let d1_over_r = -2.0 / w2 * gauss * c + if c1 != 0.0 { gauss * c1 / r } else { 0.0 };
        (phi, d1, d1_over_r, d2)
    }
}

/// Closed disk `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub center: Vec2,
    pub radius: f64,
}

impl Disk {
    pub fn unit() -> Self {
        Disk { center: Vec2::zeros(), radius: 1.0 }
    }

    pub fn circumference(&self) -> f64 {
        2.0 * PI * self.radius
    }

    pub fn contains(&self, x: Vec2) -> bool {
        (x - self.center).norm() <= self.radius
    }

    /// Signed distance to the circle, positive outside.
    pub fn level(&self, x: Vec2) -> f64 {
        (x - self.center).norm() - self.radius
    }

    /// Boundary point at arc length `s`, measured counterclockwise from the
    /// positive x-axis.
    pub fn boundary_point(&self, s: f64) -> Vec2 {
        let phi = s / self.radius;
        self.center + self.radius * Vec2::new(phi.cos(), phi.sin())
    }

    /// Arc length coordinate of the point of `∂M` closest to `x`, in `[0, 2πR)`.
    pub fn arc_length_of(&self, x: Vec2) -> f64 {
        let d = x - self.center;
        let phi = d.y.atan2(d.x).rem_euclid(2.0 * PI);
        phi * self.radius
    }

    /// Interior unit normal at the boundary point closest to `x`.
    pub fn inward_normal(&self, x: Vec2) -> Vec2 {
        -(x - self.center).normalize()
    }

    /// Signed angle from the inward normal at `x` to `v`.
    pub fn angle_to_inward_normal(&self, x: Vec2, v: Vec2) -> f64 {
        let nu = self.inward_normal(x);
        cross(nu, v).atan2(nu.dot(&v))
    }
}

/// Everything `metric_eval` reports at a point.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub g: Matrix2<f64>,
    pub g_inv: Matrix2<f64>,
    pub sqrt_det: f64,
    /// `christoffel[k][i][j] = Γ^k_{ij}`.
    pub christoffel: [[[f64; 2]; 2]; 2],
}

/// Conformal factor with its gradient and Hessian.
#[derive(Debug, Clone, Copy)]
pub struct ConformalJet {
    pub a: f64,
    pub grad: Vec2,
    pub hess: Matrix2<f64>,
}

/// The Riemannian metric `g = a·δ` together with the domain `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricField {
    pub bump: Bump,
    pub domain: Disk,
}

impl MetricField {
    pub fn euclidean() -> Self {
        MetricField { bump: Bump::none(), domain: Disk::unit() }
    }

    pub fn with_bump(bump: Bump) -> Self {
        MetricField { bump, domain: Disk::unit() }
    }

    /// The known background `g0 ≡ δ`, sharing the domain.
    pub fn background(&self) -> Self {
        MetricField { bump: Bump::none(), domain: self.domain.clone() }
    }

    pub fn is_euclidean(&self) -> bool {
        self.bump.amplitude == 0.0
    }

    /// Radius (about the domain centre) outside which `a ≡ 1`.
    pub fn euclid_radius(&self) -> f64 {
        if self.is_euclidean() {
            return 0.0;
        }
        (self.bump.center - self.domain.center).norm() + self.bump.cutoff_outer
    }

    pub fn a(&self, x: Vec2) -> f64 {
        if self.is_euclidean() {
            return 1.0;
        }
        let r = (x - self.bump.center).norm();
        if r >= self.bump.cutoff_outer {
            return 1.0;
        }
        1.0 + self.bump.amplitude * self.bump.profile(r).0
    }

    pub fn jet(&self, x: Vec2) -> ConformalJet {
        let zero = ConformalJet { a: 1.0, grad: Vec2::zeros(), hess: Matrix2::zeros() };
        if self.is_euclidean() {
            return zero;
        }
        let d = x - self.bump.center;
        let r = d.norm();
        if r >= self.bump.cutoff_outer {
            return zero;
        }
        let amp = self.bump.amplitude;
        let (phi, d1, d1_over_r, d2) = self.bump.profile(r);
        let (grad, hess) = if r < 1e-14 {
            (Vec2::zeros(), Matrix2::identity() * (amp * d2))
        } else {
            let e = d / r;
            let radial = e * e.transpose();
            let tangential = Matrix2::identity() - radial;
            (e * (amp * d1), radial * (amp * d2) + tangential * (amp * d1_over_r))
        };
        ConformalJet { a: 1.0 + amp * phi, grad, hess }
    }

    /// `g`, `g⁻¹`, `√|g|` and the Christoffel symbols at `x`.
    pub fn metric_eval(&self, x: Vec2) -> MetricEval {
        let j = self.jet(x);
        let mut christoffel = [[[0.0; 2]; 2]; 2];
        let da = [j.grad.x, j.grad.y];
        for (k, ck) in christoffel.iter_mut().enumerate() {
            for (i, cki) in ck.iter_mut().enumerate() {
                for (jj, c) in cki.iter_mut().enumerate() {
                    let dik = if i == k { 1.0 } else { 0.0 };
                    let djk = if jj == k { 1.0 } else { 0.0 };
                    let dij = if i == jj { 1.0 } else { 0.0 };
                    *c = (dik * da[jj] + djk * da[i] - dij * da[k]) / (2.0 * j.a);
                }
            }
        }
        MetricEval {
            g: Matrix2::identity() * j.a,
            g_inv: Matrix2::identity() / j.a,
            sqrt_det: j.a,
            christoffel,
        }
    }

    /// `|v|_g` at `x`.
    pub fn norm(&self, x: Vec2, v: Vec2) -> f64 {
        self.a(x).sqrt() * v.norm()
    }

    /// Geodesic curvature of `∂M` with respect to `g` at boundary point `x`;
    /// positive means strictly convex.
    pub fn boundary_curvature(&self, x: Vec2) -> f64 {
        let j = self.jet(x);
        let outward = -self.domain.inward_normal(x);
        (1.0 / self.domain.radius + 0.5 * j.grad.dot(&outward) / j.a) / j.a.sqrt()
    }

    /// Unit-speed phase point on `∂₊SM` at arc length `s`, at `angle` from the
    /// inward normal.
    pub fn inward_point(&self, s: f64, angle: f64) -> PhasePoint {
        let x = self.domain.boundary_point(s);
        let v = rotate(self.domain.inward_normal(x), angle);
        PhasePoint::unit(self, x, v)
    }
}

/// A point of the tangent bundle; `xi` is a velocity vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub x: Vec2,
    pub xi: Vec2,
}

impl PhasePoint {
    /// Normalize `v` to unit `g`-length at `x`.
    pub fn unit(metric: &MetricField, x: Vec2, v: Vec2) -> Self {
        PhasePoint { x, xi: v / metric.norm(x, v) }
    }

    /// Covector `ξ^♭ = a·ξ`.
    pub fn covector(&self, metric: &MetricField) -> Vec2 {
        self.xi * metric.a(self.x)
    }

    pub fn speed(&self, metric: &MetricField) -> f64 {
        metric.norm(self.x, self.xi)
    }

    pub fn reversed(&self) -> Self {
        PhasePoint { x: self.x, xi: -self.xi }
    }
}

/// One sample of `Σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringRecord {
    pub entry: PhasePoint,
    pub tau: f64,
    pub exit: PhasePoint,
}

/// Integration controls for the geodesic flow.
#[derive(Debug, Clone, Copy)]
pub struct GeodesicOptions {
    pub dt: f64,
    pub max_steps: usize,
    /// Give up (trapping) after this much arc length.
    pub t_max: f64,
}

impl GeodesicOptions {
    /// Step `dt` with the trapping cap `50·diam(M)`.
    pub fn for_domain(domain: &Disk, dt: f64) -> Self {
        GeodesicOptions { dt, max_steps: 50_000_000, t_max: 50.0 * 2.0 * domain.radius }
    }
}

/// Hamiltonian state `(x, p)` packed as four reals.
type State = [f64; 4];

fn hamilton_rhs(metric: &MetricField, s: &State) -> State {
    let x = Vec2::new(s[0], s[1]);
    let p = Vec2::new(s[2], s[3]);
    let j = metric.jet(x);
    let v = p / j.a;
    let f = j.grad * (0.5 * p.norm_squared() / (j.a * j.a));
    [v.x, v.y, f.x, f.y]
}

fn axpy(s: &State, h: f64, k: &State) -> State {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]]
}

fn rk4(metric: &MetricField, s: &State, h: f64) -> State {
    let k1 = hamilton_rhs(metric, s);
    let k2 = hamilton_rhs(metric, &axpy(s, 0.5 * h, &k1));
    let k3 = hamilton_rhs(metric, &axpy(s, 0.5 * h, &k2));
    let k4 = hamilton_rhs(metric, &axpy(s, h, &k3));
    let mut out = *s;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn to_state(metric: &MetricField, pp: &PhasePoint) -> State {
    let p = pp.covector(metric);
    [pp.x.x, pp.x.y, p.x, p.y]
}

fn to_point(metric: &MetricField, s: &State) -> PhasePoint {
    let x = Vec2::new(s[0], s[1]);
    PhasePoint { x, xi: Vec2::new(s[2], s[3]) / metric.a(x) }
}

/// Single RK4 step of the geodesic flow (negative `h` integrates backward).
pub fn geodesic_step(metric: &MetricField, pp: &PhasePoint, h: f64) -> PhasePoint {
    to_point(metric, &rk4(metric, &to_state(metric, pp), h))
}

/// Trace the geodesic from `start` on `[0, t_max]` with fixed step `dt`.
/// The returned path holds `start` followed by one point per step.
pub fn geodesic_trace(
    metric: &MetricField,
    start: &PhasePoint,
    dt: f64,
    t_max: f64,
    max_steps: usize,
) -> Result<Vec<PhasePoint>> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
    }
    let steps = (t_max / dt).ceil() as usize;
    if steps > max_steps {
        return Err(Error::StepOverflow { requested: steps, cap: max_steps });
    }
    let mut s = to_state(metric, start);
    let mut path = Vec::with_capacity(steps + 1);
    path.push(*start);
    for _ in 0..steps {
        s = rk4(metric, &s, dt);
        path.push(to_point(metric, &s));
    }
    Ok(path)
}

/// Travel time and exit point for a geodesic leaving `disk`.
pub fn exit_from(
    metric: &MetricField,
    disk: &Disk,
    entry: &PhasePoint,
    opts: &GeodesicOptions,
) -> Result<(f64, PhasePoint)> {
    let tol = 1e-9 * disk.radius;
    let steps = (opts.t_max / opts.dt).ceil() as usize;
    if steps > opts.max_steps {
        return Err(Error::StepOverflow { requested: steps, cap: opts.max_steps });
    }
    let mut s = to_state(metric, entry);
    let mut t = 0.0;
    let mut was_inside = false;
    for _ in 0..steps {
        let next = rk4(metric, &s, opts.dt);
        let lvl = disk.level(Vec2::new(next[0], next[1]));
        if lvl < 0.0 {
            was_inside = true;
        } else if was_inside || disk.level(Vec2::new(s[0], s[1])) < 0.0 {
            // crossing inside (s) -> outside (next); bisect the substep length
            let (mut lo, mut hi) = (0.0, opts.dt);
            let mut out = next;
            for _ in 0..200 {
                if hi - lo <= tol * 1e-3 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let trial = rk4(metric, &s, mid);
                let l = disk.level(Vec2::new(trial[0], trial[1]));
                if l >= 0.0 {
                    hi = mid;
                    out = trial;
                } else {
                    lo = mid;
                }
                if l.abs() < tol && l >= 0.0 {
                    break;
                }
            }
            return Ok((t + hi, to_point(metric, &out)));
        }
        s = next;
        t += opts.dt;
    }
    Err(Error::Trapped { t_max: opts.t_max })
}

/// First time the geodesic from `entry` leaves `M`.
pub fn exit_time(metric: &MetricField, entry: &PhasePoint, opts: &GeodesicOptions) -> Result<f64> {
    exit_from(metric, &metric.domain, entry, opts).map(|(tau, _)| tau)
}

/// `Σ(x, ξ) = (τ, γ(τ), γ̇(τ))`.
pub fn scattering_relation(
    metric: &MetricField,
    entry: &PhasePoint,
    opts: &GeodesicOptions,
) -> Result<ScatteringRecord> {
    let (tau, exit) = exit_from(metric, &metric.domain, entry, opts)?;
    Ok(ScatteringRecord { entry: *entry, tau, exit })
}

/// Number of sign changes of `|γ(t) - c| - R` along a sampled path.
pub fn boundary_crossings(path: &[PhasePoint], disk: &Disk) -> usize {
    path.windows(2)
        .filter(|w| (disk.level(w[0].x) < 0.0) != (disk.level(w[1].x) < 0.0))
        .count()
}

/// Which standing assumption failed.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A geodesic failed to exit (non-trapping).
    Trapping { s: f64, angle: f64 },
    /// Boundary not strictly convex at this arc length.
    Convexity { s: f64, curvature: f64 },
    /// `a ≠ 1` at a point beyond the Euclidean radius.
    NotEuclideanOutside { x: Vec2, a: f64 },
    /// Perturbation support reaches the boundary.
    SupportTouchesBoundary { margin: f64 },
}

#[derive(Debug, Clone, Default)]
pub struct AssumptionReport {
    pub violations: Vec<Violation>,
    pub geodesics_checked: usize,
    pub min_curvature: f64,
    pub max_travel_time: f64,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn trapping_detected(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, Violation::Trapping { .. }))
    }
}

/// Sweep `∂₊SM` for trapping, sample the boundary curvature and check that
/// the metric is Euclidean outside `R_E`.
pub fn check_assumptions(
    metric: &MetricField,
    opts: &GeodesicOptions,
    n_s: usize,
    n_angle: usize,
) -> AssumptionReport {
    let disk = &metric.domain;
    let mut report = AssumptionReport { min_curvature: f64::INFINITY, ..Default::default() };
    let circ = disk.circumference();
    let max_angle = 0.5 * PI - 0.05;
    for i in 0..n_s {
        let s = circ * i as f64 / n_s as f64;
        let x = disk.boundary_point(s);
        let k = metric.boundary_curvature(x);
        report.min_curvature = report.min_curvature.min(k);
        if k <= 0.0 {
            report.violations.push(Violation::Convexity { s, curvature: k });
        }
        for j in 0..n_angle {
            let angle = -max_angle + 2.0 * max_angle * (j as f64 + 0.5) / n_angle as f64;
            let entry = metric.inward_point(s, angle);
            report.geodesics_checked += 1;
            match exit_time(metric, &entry, opts) {
                Ok(tau) => report.max_travel_time = report.max_travel_time.max(tau),
                Err(_) => report.violations.push(Violation::Trapping { s, angle }),
            }
        }
    }
    // interior starts catch rays caught in a well that boundary rays cannot reach
    for ring in 0..4 {
        let r = disk.radius * ring as f64 / 4.0;
        let n_pts = if ring == 0 { 1 } else { (n_s / 2).max(1) };
        for k in 0..n_pts {
            let phi = 2.0 * PI * k as f64 / n_pts as f64;
            let x = disk.center + r * Vec2::new(phi.cos(), phi.sin());
            for j in 0..n_angle {
                let dir = 2.0 * PI * j as f64 / n_angle as f64;
                let start = PhasePoint::unit(metric, x, Vec2::new(dir.cos(), dir.sin()));
                report.geodesics_checked += 1;
                if exit_time(metric, &start, opts).is_err() {
                    report.violations.push(Violation::Trapping {
                        s: disk.arc_length_of(x),
                        angle: dir,
                    });
                }
            }
        }
    }
    let r_e = metric.euclid_radius();
    if r_e >= disk.radius {
        report.violations.push(Violation::SupportTouchesBoundary { margin: disk.radius - r_e });
    }
    // a ≡ 1 on rings beyond R_E
    for ring in 0..8 {
        let r = r_e.max(1e-3) * (1.0 + 1e-9) + ring as f64 * 0.3;
        for k in 0..64 {
            let phi = 2.0 * PI * k as f64 / 64.0;
            let x = disk.center + r * Vec2::new(phi.cos(), phi.sin());
            let a = metric.a(x);
            if a != 1.0 {
                report.violations.push(Violation::NotEuclideanOutside { x, a });
            }
        }
    }
    report
}

/// Σ sampled on an `n_s × n_angle` grid of `∂₊SM`.
pub fn scattering_table(
    metric: &MetricField,
    opts: &GeodesicOptions,
    n_s: usize,
    n_angle: usize,
    max_angle: f64,
) -> Result<Vec<ScatteringRecord>> {
    let circ = metric.domain.circumference();
    let mut out = Vec::with_capacity(n_s * n_angle);
    for i in 0..n_s {
        let s = circ * i as f64 / n_s as f64;
        for j in 0..n_angle {
            let angle = if n_angle == 1 {
                0.0
            } else {
                -max_angle + 2.0 * max_angle * j as f64 / (n_angle - 1) as f64
            };
            out.push(scattering_relation(metric, &metric.inward_point(s, angle), opts)?);
        }
    }
    Ok(out)
}

/// Boundary coordinates `(arc length, angle to inward normal)` of an entry
/// point, and of the reversed exit point.
pub fn record_coordinates(disk: &Disk, rec: &ScatteringRecord) -> [f64; 5] {
    [
        disk.arc_length_of(rec.entry.x),
        disk.angle_to_inward_normal(rec.entry.x, rec.entry.xi),
        rec.tau,
        disk.arc_length_of(rec.exit.x),
        disk.angle_to_inward_normal(rec.exit.x, -rec.exit.xi),
    ]
}

/// CSV with columns `entry_s, entry_angle, tau, exit_s, exit_angle`.
pub fn scattering_csv(disk: &Disk, records: &[ScatteringRecord]) -> String {
    let mut out = String::from("entry_s,entry_angle,tau,exit_s,exit_angle\n");
    for rec in records {
        let c = record_coordinates(disk, rec);
        let _ = writeln!(out, "{:.9},{:.9},{:.9},{:.9},{:.9}", c[0], c[1], c[2], c[3], c[4]);
    }
    out
}

/// Longest travel time through `disk` over a sampled sweep of inward
/// directions; used to size the time window.
pub fn max_travel_time(metric: &MetricField, disk: &Disk, opts: &GeodesicOptions, n: usize) -> Result<f64> {
    let circ = disk.circumference();
    let mut best: f64 = 0.0;
    for i in 0..n {
        let s = circ * i as f64 / n as f64;
        let x = disk.boundary_point(s);
        for j in 0..n {
            let angle = -1.4 + 2.8 * j as f64 / (n - 1) as f64;
            let entry = PhasePoint::unit(metric, x, rotate(disk.inward_normal(x), angle));
            best = best.max(exit_from(metric, disk, &entry, opts)?.0);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lens() -> MetricField {
        MetricField::with_bump(Bump::default_lens(0.2))
    }

    #[test]
    fn euclidean_metric_eval_is_identity() {
        let m = MetricField::euclidean();
        let e = m.metric_eval(Vec2::new(0.3, -0.2));
        assert_eq!(e.sqrt_det, 1.0);
        assert!(e.christoffel.iter().flatten().flatten().all(|&c| c == 0.0));
    }

    #[test]
    fn sqrt_det_at_bump_centre() {
        let bump = Bump {
            amplitude: 0.3,
            center: Vec2::zeros(),
            width: 0.2f64.sqrt(),
            cutoff_inner: 0.5,
            cutoff_outer: 0.8,
        };
        let m = MetricField::with_bump(bump);
        assert!((m.metric_eval(Vec2::zeros()).sqrt_det - 1.3).abs() < 1e-15);
    }

    #[test]
    fn christoffel_matches_finite_differences() {
        let m = lens();
        for x in [Vec2::new(0.3, 0.1), Vec2::new(0.55, -0.4), Vec2::new(0.0, 0.05)] {
            let e = m.metric_eval(x);
            let h = 1e-5;
            let dg = |i: usize| {
                let mut d = Vec2::zeros();
                d[i] = h;
                (m.a(x + d) - m.a(x - d)) / (2.0 * h)
            };
            let da = [dg(0), dg(1)];
            let a = m.a(x);
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        // Γ^k_ij = ½ g^{kl}(∂_i g_lj + ∂_j g_li − ∂_l g_ij) with g = a·δ
                        let dik = (i == k) as u8 as f64;
                        let djk = (j == k) as u8 as f64;
                        let dij = (i == j) as u8 as f64;
                        let want = 0.5 / a * (da[i] * djk + da[j] * dik - da[k] * dij);
                        assert!((e.christoffel[k][i][j] - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let m = lens();
        let x = Vec2::new(0.5, 0.2);
        let j = m.jet(x);
        let h = 1e-5;
        for c in 0..2 {
            let mut d = Vec2::zeros();
            d[c] = h;
            let g = (m.jet(x + d).grad - m.jet(x - d).grad) / (2.0 * h);
            assert!((g - j.hess.column(c)).norm() < 1e-6);
        }
    }

    #[test]
    fn euclidean_straight_line_and_diameter() {
        let m = MetricField::euclidean();
        let start = PhasePoint { x: Vec2::new(-1.0, 0.0), xi: Vec2::new(1.0, 0.0) };
        let path = geodesic_trace(&m, &start, 0.01, 1.0, 1000).unwrap();
        let end = path.last().unwrap();
        assert!((end.x - Vec2::new(0.0, 0.0)).norm() < 1e-12);
        let opts = GeodesicOptions::for_domain(&m.domain, 0.01);
        assert!((exit_time(&m, &start, &opts).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn chord_length_formula() {
        let m = MetricField::euclidean();
        let opts = GeodesicOptions::for_domain(&m.domain, 0.01);
        for &angle in &[0.0, 0.4, -0.9, 1.3] {
            let entry = m.inward_point(1.7, angle);
            let tau = exit_time(&m, &entry, &opts).unwrap();
            assert!((tau - 2.0 * f64::cos(angle)).abs() < 1e-8, "angle {angle}");
        }
    }

    #[test]
    fn step_cap_is_enforced() {
        let m = MetricField::euclidean();
        let start = PhasePoint { x: Vec2::zeros(), xi: Vec2::new(1.0, 0.0) };
        assert!(matches!(
            geodesic_trace(&m, &start, 1e-3, 10.0, 100),
            Err(Error::StepOverflow { .. })
        ));
    }

    #[test]
    fn unit_speed_is_conserved_through_bump() {
        let m = lens();
        let start = PhasePoint::unit(&m, Vec2::new(-1.0, -0.05), Vec2::new(1.0, 0.1));
        let path = geodesic_trace(&m, &start, 1e-3, 2.5, 10_000).unwrap();
        let worst = path.iter().map(|p| (p.speed(&m) - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "speed drift {worst}");
    }

    #[test]
    fn euclidean_scattering_is_antipodal_chord() {
        let m = MetricField::euclidean();
        let opts = GeodesicOptions::for_domain(&m.domain, 0.01);
        let entry = m.inward_point(0.0, 0.0);
        let rec = scattering_relation(&m, &entry, &opts).unwrap();
        assert!((rec.exit.x - Vec2::new(-1.0, 0.0)).norm() < 1e-8);
        assert!((rec.exit.xi - entry.xi).norm() < 1e-12);
        assert!(m.domain.inward_normal(rec.exit.x).dot(&rec.exit.xi) < 0.0);
    }

    #[test]
    fn tangential_limit_shrinks_travel_time() {
        let m = MetricField::euclidean();
        let opts = GeodesicOptions::for_domain(&m.domain, 1e-4);
        let mut last = f64::INFINITY;
        for &inward in &[0.2, 0.05, 0.01] {
            let angle = f64::acos(inward);
            let tau = exit_time(&m, &m.inward_point(0.3, angle), &opts).unwrap();
            assert!(tau < last);
            last = tau;
        }
        assert!(last < 0.03);
    }

    fn narrow_lens(amplitude: f64) -> MetricField {
        MetricField::with_bump(Bump {
            amplitude,
            center: Vec2::zeros(),
            width: 0.25,
            cutoff_inner: 0.45,
            cutoff_outer: 0.7,
        })
    }

    // For n² = 1 + A·exp(-r²/w²) a circular ray exists iff
    // max_x x·A·e^{-x}/(1 + A·e^{-x}) ≥ 1, which first happens near A ≈ 11.
    #[test]
    fn moderate_lens_is_not_trapping() {
        let m = narrow_lens(5.0);
        let mut opts = GeodesicOptions::for_domain(&m.domain, 5e-3);
        opts.t_max = 30.0;
        assert!(!check_assumptions(&m, &opts, 12, 12).trapping_detected());
    }

    #[test]
    fn strong_lens_traps() {
        let bump = Bump {
            amplitude: 20.0,
            center: Vec2::zeros(),
            width: 0.25,
            cutoff_inner: 0.45,
            cutoff_outer: 0.7,
        };
        let m = MetricField::with_bump(bump);
        let mut opts = GeodesicOptions::for_domain(&m.domain, 5e-3);
        opts.t_max = 30.0;
        let report = check_assumptions(&m, &opts, 24, 24);
        assert!(report.trapping_detected());
    }

    #[test]
    fn euclidean_assumptions_hold() {
        let m = MetricField::euclidean();
        let report = check_assumptions(&m, &GeodesicOptions::for_domain(&m.domain, 0.01), 8, 8);
        assert!(report.passed(), "{:?}", report.violations);
        assert!((report.min_curvature - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lens_assumptions_hold() {
        let m = lens();
        let report = check_assumptions(&m, &GeodesicOptions::for_domain(&m.domain, 5e-3), 12, 12);
        assert!(report.passed(), "{:?}", report.violations);
    }
}

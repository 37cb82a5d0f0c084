//! The processes `X^j = (W, ε^{-1/2}ψ^j)` and `Y^j = (W, ε^{-1/2}χ₊w^j)`,
//! the correlation `β_ε = ε^{-1}(ψ, w)_{L²((0,T)×∂M)}` and its ergodic
//! estimate `β_{ε,N} = N⁻¹ Σ X^j Y^j`.
//!
//! Test functions and beam traces are tabulated once as sparse lattice
//! functions; the window-`j` copies are integer step shifts of them.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::beams::{BeamInitialData, GaussianBeam};
use crate::error::{Error, Result};
use crate::geometry::{Disk, MetricField};
use crate::noise::{NoiseLattice, NoiseRealization};
use crate::stats;
use crate::testfn::{eval_test, TestFunction};
use crate::wavesolver::{chi_plus, snapshot_pairing, BoundaryTrace, Grid, SnapshotPair};

/// Tail truncation for `Y` samples, in windows.
pub const J_TAIL: usize = 8;

/// One row of a sparse lattice function: cells `start..start + values.len()` (mod `n_ell`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeRow {
    pub step: usize,
    pub start: isize,
    pub values: Vec<Complex64>,
}

/// Function on the `(step, cell)` lattice, stored row by row over its support.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeFn {
    pub lattice: NoiseLattice,
    /// Level that corresponds to the end of window 1 (`t = T`).
    pub top_step: usize,
    pub rows: Vec<LatticeRow>,
}

impl LatticeFn {
    fn row_at(&self, step: usize) -> Option<&LatticeRow> {
        self.rows.binary_search_by_key(&step, |r| r.step).ok().map(|i| &self.rows[i])
    }

    /// Bilinear `Σ f g dt Δℓ` with both functions in their own placement.
    pub fn inner(&self, other: &LatticeFn) -> Complex64 {
        let n = self.lattice.n_ell as isize;
        let mut sum = Complex64::new(0.0, 0.0);
        for r in &self.rows {
            let Some(o) = other.row_at(r.step) else { continue };
            for (k, v) in r.values.iter().enumerate() {
                let off = (r.start + k as isize - o.start).rem_euclid(n) as usize;
                if let Some(w) = o.values.get(off) {
                    sum += v * w;
                }
            }
        }
        sum * self.lattice.cell_area()
    }

    /// Whether some row in `steps` meets the cells `c0..=c1` (mod `n_ell`).
    pub fn touches(&self, steps: (usize, usize), c0: isize, c1: isize) -> bool {
        let n = self.lattice.n_ell as isize;
        let lo = self.rows.partition_point(|r| r.step < steps.0);
        self.rows[lo..].iter().take_while(|r| r.step <= steps.1).any(|r| {
            let off = (c0 - r.start).rem_euclid(n);
            let (a, b) = (c1 - c0 + 1, r.values.len() as isize);
            off < b || off + a > n
        })
    }

    /// Whether any row of `self` shares a cell with a row of `other` at the same step.
    pub fn overlaps(&self, other: &LatticeFn) -> bool {
        let n = self.lattice.n_ell as isize;
        self.rows.iter().any(|r| {
            other.row_at(r.step).is_some_and(|o| {
                let off = (r.start - o.start).rem_euclid(n);
                let (a, b) = (r.values.len() as isize, o.values.len() as isize);
                off < b || off + a > n
            })
        })
    }

    pub fn l2_squared(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.values.iter()).map(|v| v.norm_sqr()).sum::<f64>() * self.lattice.cell_area()
    }

    /// Pairing with the copy placed so that `top_step` lands on `j·T`,
    /// weighted by `χ₊` at the absolute time. Rows that land before absolute
    /// step `floor` are dropped.
    pub fn pair_window(&self, w: &NoiseRealization, j: usize, floor: usize, with_chi: bool) -> Complex64 {
        let lat = &self.lattice;
        let target = j * lat.steps_per_window;
        let mut sum = Complex64::new(0.0, 0.0);
        for r in &self.rows {
            let abs = r.step as i64 + target as i64 - self.top_step as i64;
            if abs < floor as i64 {
                continue;
            }
            let abs = abs as usize;
            let chi = if with_chi { chi_plus(lat.time(abs)) } else { 1.0 };
            if chi == 0.0 {
                continue;
            }
            let noise = w.run(abs, r.start..r.start + r.values.len() as isize);
            let dot: Complex64 = r.values.iter().zip(&noise).map(|(v, x)| v * x).sum();
            sum += dot * chi;
        }
        sum * lat.cell_area()
    }
}

/// Lattice fine enough to resolve `ψ_ε` and `U_ε`: spacing about `ε/4`,
/// with an integer number of steps per window.
pub fn fine_lattice(eps: f64, t_window: f64, disk: &Disk) -> NoiseLattice {
    let target = 0.25 * eps;
    let steps_per_window = (t_window / target).ceil() as usize;
    let circ = disk.circumference();
    let n_ell = (circ / target).ceil() as usize;
    NoiseLattice { dt: t_window / steps_per_window as f64, steps_per_window, n_ell, d_ell: circ / n_ell as f64 }
}

/// Lattice box `(steps, cells)` covering the support of `ψ`.
pub fn test_support_box(metric: &MetricField, tf: &TestFunction, lat: &NoiseLattice) -> (usize, usize, isize, isize) {
    let (t0, t1) = tf.time_support();
    let s0 = (t0 / lat.dt).floor().max(0.0) as usize;
    let s1 = (t1 / lat.dt).ceil() as usize;
    let r = metric.domain.radius;
    let arc_y = metric.domain.arc_length_of(tf.y);
    // arc subtended by a chord of length r_x
    let half = 2.0 * r * (tf.r_x.min(2.0 * r) / (2.0 * r)).asin();
    let c0 = ((arc_y - half) / lat.d_ell).floor() as isize;
    let c1 = ((arc_y + half) / lat.d_ell).ceil() as isize;
    (s0, s1, c0, c1)
}

/// `ε^{-1/2} ψ_ε` in window 1.
pub fn test_on_lattice(metric: &MetricField, tf: &TestFunction, lat: &NoiseLattice, eps: f64) -> LatticeFn {
    let scale = eps.powf(-0.5);
    let (s0, s1, c0, c1) = test_support_box(metric, tf, lat);
    let mut rows = Vec::new();
    for step in s0..=s1 {
        let t = lat.time(step);
        let values: Vec<Complex64> = (c0..=c1)
            .map(|c| {
                let x = metric.domain.boundary_point(c as f64 * lat.d_ell);
                eval_test(tf, t, x, eps) * scale * metric.a(x).sqrt()
            })
            .collect();
        if values.iter().any(|v| v.norm() > 0.0) {
            rows.push(LatticeRow { step, start: c0, values });
        }
    }
    LatticeFn { lattice: *lat, top_step: lat.steps_per_window, rows }
}

/// `ε^{-1/2} χ_U U_ε` on `[0, T] × ∂M` for the formal beam.
pub fn formal_beam_on_lattice(beam: &GaussianBeam, lat: &NoiseLattice, eps: f64) -> LatticeFn {
    let metric = beam.metric();
    let disk = metric.domain;
    let scale = eps.powf(-0.5);
    let spw = lat.steps_per_window;
    let t_end = beam.anchor.t_end;
    let top = (t_end / lat.dt).round() as usize;
    let mut rows = Vec::new();
    for step in 0..=top.min(spw.max(top)) {
        let t = lat.time(step);
        let f = beam.phase.frame(t);
        let rho = beam.tube_radius(&f);
        let rel = f.gamma - disk.center;
        let d = rel.norm();
        if (d - disk.radius).abs() >= rho {
            continue;
        }
        let theta = rel.y.atan2(rel.x);
        let half = if d + disk.radius <= rho {
            std::f64::consts::PI
        } else {
            ((disk.radius * disk.radius + d * d - rho * rho) / (2.0 * disk.radius * d)).clamp(-1.0, 1.0).acos()
        };
        let c0 = ((theta - half) * disk.radius / lat.d_ell).floor() as isize;
        let c1 = ((theta + half) * disk.radius / lat.d_ell).ceil() as isize;
        let c1 = c1.min(c0 + lat.n_ell as isize - 1);
        let values: Vec<Complex64> = (c0..=c1)
            .map(|c| {
                let x = disk.boundary_point(c as f64 * lat.d_ell);
                beam.eval_with_frame(&f, x, eps) * scale * metric.a(x).sqrt()
            })
            .collect();
        if values.iter().any(|v| v.norm() > 0.0) {
            rows.push(LatticeRow { step, start: c0, values });
        }
    }
    LatticeFn { lattice: *lat, top_step: top, rows }
}

/// `ε^{-1/2} w` from solver traces of the real and imaginary parts, whose
/// last level `top_step` is the beam's terminal time. Entries below
/// `tol·max|w|` are dropped.
pub fn solved_beam_on_lattice(re: &BoundaryTrace, im: &BoundaryTrace, lat: &NoiseLattice, eps: f64, top_step: usize, tol: f64) -> LatticeFn {
    let scale = eps.powf(-0.5);
    let peak = re.max_abs().max(im.max_abs());
    let cut = tol * peak;
    let n = lat.n_ell;
    let mut rows = Vec::new();
    for s in 0..re.steps() {
        let step = re.first_step + s;
        let (r, i) = (re.row(step).unwrap(), im.row(step).unwrap());
        let keep: Vec<usize> = (0..n).filter(|&c| r[c].abs().max(i[c].abs()) > cut).collect();
        if keep.is_empty() {
            continue;
        }
        let (c0, c1) = (keep[0], *keep.last().unwrap());
        let values = (c0..=c1).map(|c| Complex64::new(r[c], i[c]) * scale).collect();
        rows.push(LatticeRow { step, start: c0 as isize, values });
    }
    LatticeFn { lattice: *lat, top_step, rows }
}

/// `β_ε = ε^{-1}(ψ_ε, w_ε)` by quadrature on the lattice of `xf` and `yf`.
pub fn beta_quadrature(xf: &LatticeFn, yf: &LatticeFn) -> Complex64 {
    // both are scaled by ε^{-1/2}; place them in the same window
    if xf.top_step == yf.top_step {
        return xf.inner(yf);
    }
    let shift = xf.top_step as i64 - yf.top_step as i64;
    let moved = LatticeFn {
        lattice: yf.lattice,
        top_step: xf.top_step,
        rows: yf
            .rows
            .iter()
            .filter_map(|r| {
                let s = r.step as i64 + shift;
                (s >= 0).then(|| LatticeRow { step: s as usize, ..r.clone() })
            })
            .collect(),
    };
    xf.inner(&moved)
}

/// `X^j` (window `j ≥ 1`).
pub fn x_sample(w: &NoiseRealization, xf: &LatticeFn, j: usize) -> Complex64 {
    xf.pair_window(w, j, 0, false)
}

/// `Y^j` from a tabulated beam trace, truncated to the last `j_tail` windows.
pub fn y_sample_direct(w: &NoiseRealization, yf: &LatticeFn, j: usize, j_tail: usize) -> Complex64 {
    let floor = j.saturating_sub(j_tail) * yf.lattice.steps_per_window;
    yf.pair_window(w, j, floor, true)
}

/// `Y^j` from the observer's data: the incoming snapshot plus the exterior
/// reconstruction of the scattered one, paired with the beam's snapshots.
pub fn y_sample_data(
    grid: &Grid,
    a: &[f64],
    incoming: &SnapshotPair,
    exterior: &SnapshotPair,
    beam: &BeamInitialData,
    eps: f64,
) -> Result<Complex64> {
    if beam.distance <= 0.0 {
        return Err(Error::SupportLeak);
    }
    let total = incoming.add(exterior);
    Ok(y_from_snapshot(grid, a, &total, beam, eps))
}

/// `ε^{-1/2}` times the snapshot pairing of `u` with the complex beam data.
pub fn y_from_snapshot(grid: &Grid, a: &[f64], u: &SnapshotPair, beam: &BeamInitialData, eps: f64) -> Complex64 {
    let scale = eps.powf(-0.5);
    Complex64::new(snapshot_pairing(grid, a, u, &beam.re), snapshot_pairing(grid, a, u, &beam.im)) * scale
}

/// Restrict a snapshot to `nodes`, which must be a subset of its support.
pub fn restrict(snap: &SnapshotPair, nodes: &[usize]) -> SnapshotPair {
    let pos: std::collections::HashMap<usize, usize> = snap.nodes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let idx: Vec<usize> = nodes.iter().map(|k| pos[k]).collect();
    SnapshotPair {
        t: snap.t,
        nodes: nodes.to_vec(),
        u: idx.iter().map(|&i| snap.u[i]).collect(),
        ut: idx.iter().map(|&i| snap.ut[i]).collect(),
    }
}

/// One `(X^j, Y^j)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSample {
    pub seed: u64,
    pub j: usize,
    pub pt_id: usize,
    pub pgb_id: usize,
    pub epsilon: f64,
    pub x: Complex64,
    pub y_direct: Complex64,
    pub y_data: Option<Complex64>,
}

/// CSV with header `seed,j,pt_id,pgb_id,epsilon,re_x,im_x,re_y_direct,im_y_direct,re_y_data,im_y_data`.
pub fn samples_csv(samples: &[CorrelationSample]) -> String {
    let mut out = String::from("seed,j,pt_id,pgb_id,epsilon,re_x,im_x,re_y_direct,im_y_direct,re_y_data,im_y_data\n");
    for s in samples {
        let (dr, di) = s.y_data.map_or((f64::NAN, f64::NAN), |y| (y.re, y.im));
        out.push_str(&format!(
            "{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            s.seed, s.j, s.pt_id, s.pgb_id, s.epsilon, s.x.re, s.x.im, s.y_direct.re, s.y_direct.im, dr, di
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMethod {
    Quadrature,
    ErgodicDirect,
    ErgodicData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub value: Complex64,
    pub n_windows: usize,
    pub std_error: f64,
    pub method: BetaMethod,
}

/// `β_{ε,N} = N⁻¹ Σ_{j≤N} X^j Y^j` with a jackknife standard error.
pub fn ergodic_estimate(products: &[Complex64], n: usize, method: BetaMethod) -> BetaEstimate {
    let z = &products[..n];
    let std_error = if n > 1 { stats::jackknife_std_error(z) } else { 0.0 };
    BetaEstimate { value: stats::complex_mean(z), n_windows: n, std_error, method }
}

/// `(X^j, Y^j)` for `j = 1..=n` from one seed, with tabulated functions.
pub fn direct_products(w: &NoiseRealization, xf: &LatticeFn, yf: &LatticeFn, n: usize) -> Vec<Complex64> {
    (1..=n).map(|j| x_sample(w, xf, j) * y_sample_direct(w, yf, j, J_TAIL)).collect()
}

/// Empirical `|Cov(X^jY^j, X^kY^k)|` at the given lags, pooled over seeds
/// and over `j`, using the conjugated product as in the variance expansion.
pub fn cross_window_covariance(products: &[Vec<Complex64>], lags: &[usize]) -> Vec<(usize, f64, f64)> {
    let all: Vec<Complex64> = products.iter().flatten().copied().collect();
    let m = stats::complex_mean(&all);
    lags.iter()
        .map(|&lag| {
            let terms: Vec<Complex64> = products
                .iter()
                .flat_map(|p| (0..p.len().saturating_sub(lag)).map(move |j| (p[j + lag] - m) * (p[j] - m).conj()))
                .collect();
            let c = stats::complex_mean(&terms);
            (lag, c.norm(), stats::complex_std_error(&terms))
        })
        .collect()
}

/// Complex Gaussian vector `A·(g₁ + i g₂)/√2 + B·(h₁ + i h₂)/√2` draws.
struct ComplexGaussian {
    rng: ChaCha8Rng,
}

impl ComplexGaussian {
    fn new(seed: u64) -> Self {
        ComplexGaussian { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self) -> f64 {
        let u1 = ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2 = ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    /// Complex linear combination `Σ_k m[i][k] g_k` of `d` real standard normals.
    fn draw<const D: usize, const K: usize>(&mut self, m: &[[Complex64; K]; D]) -> [Complex64; D] {
        let g: Vec<f64> = (0..K).map(|_| self.normal()).collect();
        let mut out = [Complex64::new(0.0, 0.0); D];
        for i in 0..D {
            out[i] = (0..K).map(|k| m[i][k] * g[k]).sum();
        }
        out
    }
}

/// Exact second moments of `Σ_k m_ik g_k` for real i.i.d. `g`: `E Z_a Z_b` and `E Z_a conj Z_b`.
fn moments<const D: usize, const K: usize>(m: &[[Complex64; K]; D], a: usize, b: usize) -> (Complex64, Complex64) {
    let plain = (0..K).map(|k| m[a][k] * m[b][k]).sum();
    let conj = (0..K).map(|k| m[a][k] * m[b][k].conj()).sum();
    (plain, conj)
}

/// Outcome of the Gaussian-moment checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    /// Largest |z| of the Monte-Carlo check of `E|XY|² = |E XȲ|² + |E XY|² + E|X|²E|Y|²`.
    pub identity_max_z: f64,
    /// Number of covariance structures where `|E XYZV| ≤ 3√(Π E|·|²)` failed (exact and sampled).
    pub bound_violations: usize,
    pub structures: usize,
    /// Largest sampled `|E XYZV| / (3√Π)`.
    pub bound_max_ratio: f64,
    /// `max_N N^{1/2}|S_N|` for the `p = 1/2` sequence, for `N` in the sweep.
    pub simple_ineq_scaled: Vec<(usize, f64)>,
}

/// Items (a), (b) and (d) of the Gaussian lemma suite.
pub fn gaussian_lemma_suite(n_samples: usize, seed: u64) -> Result<LemmaReport> {
    let mut gen = ComplexGaussian::new(seed);
    let mut identity_max_z: f64 = 0.0;
    // (a): a few structured and random pairs
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut cases: Vec<[[Complex64; 4]; 2]> = vec![
        [[c(s, 0.0), c(0.0, s), c(0.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0), c(0.0, s)]],
        [[c(s, 0.0), c(0.0, s), c(0.0, 0.0), c(0.0, 0.0)], [c(s, 0.0), c(0.0, s), c(0.0, 0.0), c(0.0, 0.0)]],
    ];
    for _ in 0..4 {
        let mut m = [[c(0.0, 0.0); 4]; 2];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = c(gen.uniform(-1.0, 1.0), gen.uniform(-1.0, 1.0));
            }
        }
        cases.push(m);
    }
    for m in &cases {
        let (exy, exyc) = moments(m, 0, 1);
        let (_, exx) = moments(m, 0, 0);
        let (_, eyy) = moments(m, 1, 1);
        let exact = exyc.norm_sqr() + exy.norm_sqr() + exx.re * eyy.re;
        let vals: Vec<f64> = (0..n_samples)
            .map(|_| {
                let [x, y] = gen.draw(m);
                (x * y).norm_sqr()
            })
            .collect();
        let z = (stats::mean(&vals) - exact) / stats::std_error(&vals);
        identity_max_z = identity_max_z.max(z.abs());
    }
    // (b): 100 random structures
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    let structures = 100;
    for _ in 0..structures {
        let mut m = [[c(0.0, 0.0); 6]; 4];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = c(gen.uniform(-1.0, 1.0), gen.uniform(-1.0, 1.0));
            }
        }
        let pm = |a, b| moments(&m, a, b).0;
        let var = |a| moments(&m, a, a).1.re;
        // Isserlis for jointly Gaussian zero-mean variables
        let exact = pm(0, 1) * pm(2, 3) + pm(0, 2) * pm(1, 3) + pm(0, 3) * pm(1, 2);
        let bound = 3.0 * (var(0) * var(1) * var(2) * var(3)).sqrt();
        let sampled: Complex64 = (0..n_samples / 10)
            .map(|_| {
                let v = gen.draw(&m);
                v[0] * v[1] * v[2] * v[3]
            })
            .sum::<Complex64>()
            / (n_samples / 10) as f64;
        if exact.norm() > bound * (1.0 + 1e-12) {
            violations += 1;
        }
        max_ratio = max_ratio.max(sampled.norm() / bound);
    }
    // (d): a_j b_k = |j − k|^{-1/2}
    let simple: Vec<(usize, f64)> = [16usize, 64, 256, 1024, 4096]
        .iter()
        .map(|&n| {
            let sum: f64 = (1..n).map(|l| (n - l) as f64 * (l as f64).powf(-0.5)).sum();
            let s_n = sum / (n * n) as f64;
            (n, s_n * (n as f64).sqrt())
        })
        .collect();
    let report = LemmaReport {
        identity_max_z,
        bound_violations: violations,
        structures,
        bound_max_ratio: max_ratio,
        simple_ineq_scaled: simple,
    };
    if report.identity_max_z > 5.0 {
        return Err(Error::LemmaFail(format!("fourth-moment identity z = {:.2}", report.identity_max_z)));
    }
    if report.bound_violations > 0 {
        return Err(Error::LemmaFail(format!("{} bound violations", report.bound_violations)));
    }
    if report.simple_ineq_scaled.iter().any(|(_, v)| *v > 2.0) {
        return Err(Error::LemmaFail("N^{1/2}|S_N| not bounded".into()));
    }
    Ok(report)
}

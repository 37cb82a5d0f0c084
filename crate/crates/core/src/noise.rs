//! Boundary white noise on the space-time lattice `(i·dt, c·Δℓ)`.
//!
//! Each cell carries an independent `N(0, 1/(dt·Δℓ))` value so that the
//! lattice pairing `Σ W_ic φ(t_i, ℓ_c) dt Δℓ` has covariance
//! `Σ φψ dt Δℓ → (φ, ψ)_{L²(ℝ×∂M)}`.
//!
//! Values come from ChaCha8 keyed by the seed, with the window index as the
//! stream and the cell index fixing the word position, so any cell can be
//! generated on its own.

use std::ops::Range;

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::stats;

/// Words of keystream consumed per cell (two `u64` for one Box–Muller draw).
const WORDS_PER_CELL: u128 = 4;

/// Space-time sampling of `ℝ × ∂M`, cut into windows of `steps_per_window` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLattice {
    pub dt: f64,
    pub steps_per_window: usize,
    pub n_ell: usize,
    pub d_ell: f64,
}

impl NoiseLattice {
    pub fn window_length(&self) -> f64 {
        self.dt * self.steps_per_window as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dt * self.d_ell
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn arc(&self, cell: usize) -> f64 {
        cell as f64 * self.d_ell
    }
}

/// One seeded realization over `n_windows` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub seed: u64,
    pub lattice: NoiseLattice,
    pub n_windows: usize,
    /// Added to every standard normal draw. Zero except in tests that need
    /// a deliberately broken generator.
    pub bias: f64,
}

fn unit_open(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `sample(seed, lattice, n_windows)`.
pub fn sample(seed: u64, lattice: NoiseLattice, n_windows: usize) -> NoiseRealization {
    NoiseRealization { seed, lattice, n_windows, bias: 0.0 }
}

impl NoiseRealization {
    pub fn std_dev(&self) -> f64 {
        1.0 / self.lattice.cell_area().sqrt()
    }

    pub fn total_steps(&self) -> usize {
        self.n_windows * self.lattice.steps_per_window
    }

    fn rng_at(&self, step: usize, cell: usize) -> ChaCha8Rng {
        let spw = self.lattice.steps_per_window;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((step / spw) as u64);
        let local = ((step % spw) * self.lattice.n_ell + cell) as u128;
        rng.set_word_pos(local * WORDS_PER_CELL);
        rng
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (u1, u2) = (unit_open(rng.next_u64()), unit_open(rng.next_u64()));
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z + self.bias) * self.std_dev()
    }

    /// `W` at one lattice cell. Zero outside the sampled windows.
    pub fn value(&self, step: usize, cell: usize) -> f64 {
        if step >= self.total_steps() {
            return 0.0;
        }
        self.draw(&mut self.rng_at(step, cell % self.lattice.n_ell))
    }

    /// Contiguous run of cells `cells.start..cells.end` (indices taken mod `n_ell`) at one step.
    pub fn run(&self, step: usize, cells: Range<isize>) -> Vec<f64> {
        let n = self.lattice.n_ell as isize;
        let len = (cells.end - cells.start).max(0) as usize;
        let mut out = Vec::with_capacity(len);
        if step >= self.total_steps() {
            out.resize(len, 0.0);
            return out;
        }
        let mut c = cells.start;
        while c < cells.end {
            let start = c.rem_euclid(n) as usize;
            let stop = (cells.end - c).min(n - start as isize) as usize;
            let mut rng = self.rng_at(step, start);
            for _ in 0..stop {
                out.push(self.draw(&mut rng));
            }
            c += stop as isize;
        }
        out
    }

    /// All cells at one step.
    pub fn row(&self, step: usize) -> Vec<f64> {
        self.run(step, 0..self.lattice.n_ell as isize)
    }

    /// Window `j` as a row-major `steps_per_window × n_ell` array.
    pub fn window(&self, j: usize) -> Vec<f64> {
        let spw = self.lattice.steps_per_window;
        (j * spw..(j + 1) * spw).flat_map(|s| self.row(s)).collect()
    }

    /// CSV dump of one window: `t,arclength,value`.
    pub fn window_csv(&self, j: usize) -> String {
        let mut out = String::from("t,arclength,value\n");
        let spw = self.lattice.steps_per_window;
        for step in j * spw..(j + 1) * spw {
            for (c, v) in self.row(step).into_iter().enumerate() {
                out.push_str(&format!("{:.6},{:.6},{:.9e}\n", self.lattice.time(step), self.lattice.arc(c), v));
            }
        }
        out
    }
}

/// Rectangular piece of the lattice: steps `steps`, cells `cells` (mod `n_ell`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePatch {
    pub steps: Range<usize>,
    pub cells: Range<isize>,
}

/// `(W, φ) ≈ Σ W_ic φ(t_i, c) dt Δℓ` over `patch`. `φ` gets the time and the
/// cell index reduced mod `n_ell`.
pub fn pair<F>(w: &NoiseRealization, patch: &LatticePatch, phi: F) -> Complex64
where
    F: Fn(f64, usize) -> Complex64,
{
    let lat = &w.lattice;
    let n = lat.n_ell as isize;
    let mut sum = Complex64::new(0.0, 0.0);
    for step in patch.steps.clone() {
        let t = lat.time(step);
        let vals = w.run(step, patch.cells.clone());
        for (k, v) in vals.into_iter().enumerate() {
            let c = (patch.cells.start + k as isize).rem_euclid(n) as usize;
            sum += phi(t, c) * v;
        }
    }
    sum * lat.cell_area()
}

/// Discrete `L²` inner product `Σ φ ψ dt Δℓ` (bilinear) over `patch`.
pub fn lattice_inner<F, G>(lat: &NoiseLattice, patch: &LatticePatch, phi: F, psi: G) -> Complex64
where
    F: Fn(f64, usize) -> Complex64,
    G: Fn(f64, usize) -> Complex64,
{
    let n = lat.n_ell as isize;
    let mut sum = Complex64::new(0.0, 0.0);
    for step in patch.steps.clone() {
        let t = lat.time(step);
        for c in patch.cells.clone() {
            let c = c.rem_euclid(n) as usize;
            sum += phi(t, c) * psi(t, c);
        }
    }
    sum * lat.cell_area()
}

/// Real test function on the lattice used by the covariance suite: a smooth
/// bump centred at `(t0, ℓ0)` with radii `(rt, rl)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeBump {
    pub t0: f64,
    pub l0: f64,
    pub rt: f64,
    pub rl: f64,
    /// Frequency of an optional `cos` modulation in `t`.
    pub freq: f64,
}

impl LatticeBump {
    pub fn eval(&self, lat: &NoiseLattice, t: f64, c: usize) -> f64 {
        let circ = lat.d_ell * lat.n_ell as f64;
        let mut dl = (lat.arc(c) - self.l0).rem_euclid(circ);
        if dl > 0.5 * circ {
            dl -= circ;
        }
        let u = ((t - self.t0) / self.rt).powi(2) + (dl / self.rl).powi(2);
        if u >= 1.0 {
            return 0.0;
        }
        (-1.0 / (1.0 - u)).exp() * std::f64::consts::E * (self.freq * (t - self.t0)).cos()
    }

    pub fn patch(&self, lat: &NoiseLattice) -> LatticePatch {
        let s0 = ((self.t0 - self.rt) / lat.dt).floor().max(0.0) as usize;
        let s1 = ((self.t0 + self.rt) / lat.dt).ceil() as usize + 1;
        let c0 = ((self.l0 - self.rl) / lat.d_ell).floor() as isize;
        let c1 = ((self.l0 + self.rl) / lat.d_ell).ceil() as isize + 1;
        LatticePatch { steps: s0..s1, cells: c0..c1 }
    }
}

fn union(a: &LatticePatch, b: &LatticePatch) -> LatticePatch {
    LatticePatch {
        steps: a.steps.start.min(b.steps.start)..a.steps.end.max(b.steps.end),
        cells: a.cells.start.min(b.cells.start)..a.cells.end.max(b.cells.end),
    }
}

/// One line of the covariance report.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceCheck {
    pub label: String,
    pub exact: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub z: f64,
}

/// Gaussianity and stationarity side checks over the same seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub checks: Vec<CovarianceCheck>,
    /// Excess-free kurtosis of `pair(W, φ)/‖φ‖` and its standard error.
    pub kurtosis: f64,
    pub kurtosis_se: f64,
    /// z-score of the variance difference between `φ` and `φ` shifted by one window.
    pub translation_z: f64,
}

impl CovarianceReport {
    pub fn max_abs_z(&self) -> f64 {
        self.checks.iter().map(|c| c.z.abs()).fold(0.0, f64::max)
    }
}

/// Fixed library of pairs: identical, disjoint, half-overlapping, modulated
/// against plain, and wrapped around `ℓ = 0`.
pub fn covariance_library(lat: &NoiseLattice) -> Vec<(&'static str, LatticeBump, LatticeBump)> {
    let t_mid = 0.5 * lat.window_length();
    let circ = lat.d_ell * lat.n_ell as f64;
    let b = LatticeBump { t0: t_mid, l0: 0.25 * circ, rt: 0.3, rl: 0.3, freq: 0.0 };
    vec![
        ("identical", b, b),
        ("disjoint", b, LatticeBump { l0: 0.75 * circ, ..b }),
        ("half_overlap", b, LatticeBump { t0: t_mid + 0.3, ..b }),
        ("modulated", b, LatticeBump { freq: 6.0, l0: b.l0 + 0.1, ..b }),
        ("wrapped", LatticeBump { l0: 0.05, ..b }, LatticeBump { l0: -0.1, ..b }),
    ]
}

/// Empirical `E[(W,φ)(W,ψ)]` over `n_seeds` seeds against `Σ φψ dt Δℓ`.
pub fn covariance_suite(lat: &NoiseLattice, n_seeds: u64, first_seed: u64, bias: f64) -> Result<CovarianceReport> {
    use rayon::prelude::*;
    let library = covariance_library(lat);
    let mut checks = Vec::new();
    let mut kurtosis = (0.0, 0.0);
    let mut translation_z = 0.0;
    for (k, (label, f, g)) in library.iter().enumerate() {
        let patch = union(&f.patch(lat), &g.patch(lat));
        let phi = |t: f64, c: usize| Complex64::from(f.eval(lat, t, c));
        let psi = |t: f64, c: usize| Complex64::from(g.eval(lat, t, c));
        let exact = lattice_inner(lat, &patch, phi, psi).re;
        let samples: Vec<(f64, f64)> = (0..n_seeds)
            .into_par_iter()
            .map(|s| {
                let mut w = sample(first_seed + s, *lat, 2);
                w.bias = bias;
                (pair(&w, &patch, phi).re, pair(&w, &patch, psi).re)
            })
            .collect();
        let prod: Vec<f64> = samples.iter().map(|(a, b)| a * b).collect();
        let empirical = stats::mean(&prod);
        let std_error = stats::std_error(&prod);
        checks.push(CovarianceCheck { label: label.to_string(), exact, empirical, std_error, z: (empirical - exact) / std_error });
        if k == 0 {
            let norm = exact.sqrt();
            let xs: Vec<f64> = samples.iter().map(|(a, _)| a / norm).collect();
            let kurt = stats::kurtosis(&xs);
            kurtosis = (kurt, (24.0 / xs.len() as f64).sqrt());
            // same φ one window later
            let shifted = LatticeBump { t0: f.t0 + lat.window_length(), ..*f };
            let sp = shifted.patch(lat);
            let later: Vec<f64> = (0..n_seeds)
                .into_par_iter()
                .map(|s| {
                    let mut w = sample(first_seed + s, *lat, 2);
                    w.bias = bias;
                    pair(&w, &sp, |t, c| Complex64::from(shifted.eval(lat, t, c))).re.powi(2)
                })
                .collect();
            let (m0, m1) = (stats::mean(&prod), stats::mean(&later));
            let se = (stats::std_error(&prod).powi(2) + stats::std_error(&later).powi(2)).sqrt();
            translation_z = (m1 - m0) / se;
        }
    }
    let report = CovarianceReport { checks, kurtosis: kurtosis.0, kurtosis_se: kurtosis.1, translation_z };
    if report.max_abs_z() > 5.0 {
        let worst = report.checks.iter().max_by(|a, b| a.z.abs().total_cmp(&b.z.abs())).unwrap();
        return Err(Error::CovarianceFail(format!("{}: z = {:.2}", worst.label, worst.z)));
    }
    Ok(report)
}

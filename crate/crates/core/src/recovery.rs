//! Inverse-problem driver: scan pass points against each beam anchor,
//! extrapolate `β = lim β_ε`, detect the non-vanishing set and turn the
//! detected pass point into a sample of the scattering relation.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::beams::{init_beam, BeamAnchor, BeamInitialData, BeamOptions, GaussianBeam};
use crate::correlator::{
    beta_quadrature, fine_lattice, formal_beam_on_lattice, restrict, test_on_lattice, test_support_box, x_sample,
    y_sample_data, LatticeFn,
};
use crate::error::{Error, Result};
use crate::geometry::{
    max_travel_time, rotate, scattering_relation, Bump, Disk, GeodesicOptions, MetricField, ScatteringRecord, Vec2,
};
use crate::noise::{sample, NoiseLattice};
use crate::stats;
use crate::testfn::{make_test, PassPoint, TestFunction, INWARD_FLOOR};
use crate::wavesolver::{measurement, Grid, GridSpec};

/// Where `β_ε` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Quadrature of `ψ_ε` against the formal beam trace.
    Oracle,
    /// Ergodic average of `X^j Y^j` with `Y` formed from the measurement.
    Data,
}

/// Everything a run needs. Parsed from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub metric: MetricField,
    pub grid_h: f64,
    pub eps_ladder: Vec<f64>,
    pub pt_arc: usize,
    pub pt_angles: usize,
    pub pt_s: usize,
    /// Largest |angle| between `η` and the inward normal on the pt grid.
    pub max_angle: f64,
    pub r_t: f64,
    pub r_x: f64,
    /// Explicit anchors `(z, ζ)`; when empty, `n_anchors` are placed on a ring.
    pub anchors: Vec<(Vec2, Vec2)>,
    pub n_anchors: usize,
    pub anchor_radius: f64,
    pub anchor_tilt: f64,
    /// `H(T) = (c − i·b)⁻¹·I`: in free space the beam has its waist a
    /// distance `c` before `z`, with Rayleigh length `b`. `None` puts the
    /// waist at the anchor's distance from the centre of `M`.
    pub beam_waist: Option<f64>,
    pub beam_rayleigh: f64,
    pub first_seed: u64,
    pub n_seeds: usize,
    pub n_windows: usize,
    /// Detection threshold in units of the error bar.
    pub theta_factor: f64,
    pub prominence: f64,
    pub mode: Mode,
    /// Window length; computed from the travel times when absent.
    pub t_window: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            metric: MetricField::with_bump(Bump::default_lens(0.2)),
            grid_h: 0.02,
            eps_ladder: vec![0.08, 0.04, 0.02, 0.01],
            pt_arc: 32,
            pt_angles: 16,
            pt_s: 24,
            max_angle: 1.3,
            r_t: 0.9,
            r_x: 0.9,
            anchors: Vec::new(),
            n_anchors: 8,
            anchor_radius: 2.3,
            anchor_tilt: 0.3,
            beam_waist: None,
            beam_rayleigh: 1.0,
            first_seed: 1,
            n_seeds: 4,
            n_windows: 16,
            theta_factor: 5.0,
            prominence: 3.0,
            mode: Mode::Oracle,
            t_window: None,
        }
    }
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Config { line, message: format!("expected a number, got `{}`", v.trim()) })
}

fn parse_usize(v: &str, line: usize) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config { line, message: format!("expected a count, got `{}`", v.trim()) })
}

fn parse_list(v: &str, line: usize, len: Option<usize>) -> Result<Vec<f64>> {
    let xs = v.split(',').map(|x| parse_f64(x, line)).collect::<Result<Vec<_>>>()?;
    match len {
        Some(n) if xs.len() != n => Err(Error::Config { line, message: format!("expected {n} comma-separated numbers") }),
        _ => Ok(xs),
    }
}

impl ExperimentConfig {
    pub fn euclidean_preset() -> Self {
        ExperimentConfig { metric: MetricField::euclidean(), ..Default::default() }
    }

    pub fn bump_preset() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys,
    /// repeated keys and bad values are reported with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut bump = Bump::default_lens(0.2);
        let mut euclidean = false;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, message: "expected `key = value`".into() });
            };
            let (key, value) = (key.trim(), value.trim());
            if key != "anchor" && !seen.insert(key.to_string()) {
                return Err(Error::Config { line, message: format!("`{key}` given twice") });
            }
            match key {
                "metric" => match value {
                    "euclidean" => euclidean = true,
                    "bump" => euclidean = false,
                    _ => return Err(Error::Config { line, message: format!("unknown metric `{value}`") }),
                },
                "bump_amplitude" => bump.amplitude = parse_f64(value, line)?,
                "bump_center" => {
                    let c = parse_list(value, line, Some(2))?;
                    bump.center = Vec2::new(c[0], c[1]);
                }
                "bump_width" => bump.width = parse_f64(value, line)?,
                "bump_cutoff" => {
                    let c = parse_list(value, line, Some(2))?;
                    (bump.cutoff_inner, bump.cutoff_outer) = (c[0], c[1]);
                }
                "grid_h" => cfg.grid_h = parse_f64(value, line)?,
                "eps_ladder" => cfg.eps_ladder = parse_list(value, line, None)?,
                "pt_arc" => cfg.pt_arc = parse_usize(value, line)?,
                "pt_angles" => cfg.pt_angles = parse_usize(value, line)?,
                "pt_s" => cfg.pt_s = parse_usize(value, line)?,
                "max_angle" => cfg.max_angle = parse_f64(value, line)?,
                "r_t" => cfg.r_t = parse_f64(value, line)?,
                "r_x" => cfg.r_x = parse_f64(value, line)?,
                "anchor" => {
                    let a = parse_list(value, line, Some(4))?;
                    cfg.anchors.push((Vec2::new(a[0], a[1]), Vec2::new(a[2], a[3])));
                }
                "anchors" => cfg.n_anchors = parse_usize(value, line)?,
                "anchor_radius" => cfg.anchor_radius = parse_f64(value, line)?,
                "anchor_tilt" => cfg.anchor_tilt = parse_f64(value, line)?,
                "beam_waist" => cfg.beam_waist = Some(parse_f64(value, line)?),
                "beam_rayleigh" => cfg.beam_rayleigh = parse_f64(value, line)?,
                "first_seed" => cfg.first_seed = parse_usize(value, line)? as u64,
                "seeds" => cfg.n_seeds = parse_usize(value, line)?,
                "windows" => cfg.n_windows = parse_usize(value, line)?,
                "theta_factor" => cfg.theta_factor = parse_f64(value, line)?,
                "prominence" => cfg.prominence = parse_f64(value, line)?,
                "mode" => {
                    cfg.mode = match value {
                        "oracle" => Mode::Oracle,
                        "data" => Mode::Data,
                        _ => return Err(Error::Config { line, message: format!("unknown mode `{value}`") }),
                    }
                }
                "t_window" => cfg.t_window = Some(parse_f64(value, line)?),
                _ => return Err(Error::Config { line, message: format!("unknown key `{key}`") }),
            }
        }
        cfg.metric = if euclidean { MetricField::euclidean() } else { MetricField::with_bump(bump) };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Invariants that do not depend on the window length.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Err(Error::Config { line: 0, message: message.into() });
        if self.eps_ladder.len() < 2 || self.eps_ladder.windows(2).any(|w| w[1] >= w[0]) || self.eps_ladder[0] <= 0.0 {
            return bad("eps_ladder must have at least two strictly decreasing positive entries");
        }
        if self.max_angle.cos() < INWARD_FLOOR {
            return bad("max_angle leaves the inwardness floor");
        }
        if self.pt_arc < 3 || self.pt_angles < 3 || self.pt_s < 3 {
            return bad("pt grid needs at least 3 points per axis");
        }
        if self.beam_rayleigh <= 0.0 {
            return bad("beam_rayleigh must be positive");
        }
        if self.n_seeds == 0 || self.n_windows == 0 {
            return bad("seeds and windows must be positive");
        }
        Ok(())
    }

    pub fn geodesic_options(&self) -> GeodesicOptions {
        GeodesicOptions::for_domain(&self.metric.domain, 2e-3)
    }

    /// `M̂`: the disk through the anchors, with a small margin.
    pub fn hull(&self) -> Disk {
        let far = self.anchors.iter().map(|(z, _)| (z - self.metric.domain.center).norm()).fold(self.anchor_radius, f64::max);
        Disk { center: self.metric.domain.center, radius: far + 0.2 }
    }

    /// `T = 2·(longest geodesic through M̂) + 1` unless set explicitly.
    pub fn window_length(&self) -> Result<f64> {
        match self.t_window {
            Some(t) => Ok(t),
            None => {
                let hull = self.hull();
                let opts = GeodesicOptions::for_domain(&hull, 2e-3);
                Ok(2.0 * max_travel_time(&self.metric, &hull, &opts, 24)? + 1.0)
            }
        }
    }

    /// Explicit anchors, or a ring of `n_anchors` tilted by varying amounts.
    pub fn anchor_list(&self, t_window: f64) -> Vec<BeamAnchor> {
        if !self.anchors.is_empty() {
            return self
                .anchors
                .iter()
                .map(|&(z, zeta)| BeamAnchor { t_end: t_window, z, zeta: zeta.normalize() })
                .collect();
        }
        let c = self.metric.domain.center;
        (0..self.n_anchors)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / self.n_anchors as f64 + 0.1;
                let dir = Vec2::new(phi.cos(), phi.sin());
                let tilt = self.anchor_tilt * (2.4 * k as f64).cos();
                BeamAnchor { t_end: t_window, z: c + self.anchor_radius * dir, zeta: rotate(-dir, tilt) }
            })
            .collect()
    }

    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions { eps_max: self.eps_ladder[0], ..Default::default() }
    }
}

/// The `(s, arc length, angle)` scan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PtGrid {
    pub s: Vec<f64>,
    pub arc: Vec<f64>,
    pub angle: Vec<f64>,
}

impl PtGrid {
    pub fn new(cfg: &ExperimentConfig, t_window: f64) -> Self {
        let lin = |lo: f64, hi: f64, n: usize| (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let margin = 1.0 + 1e-3;
        let circ = cfg.metric.domain.circumference();
        PtGrid {
            s: lin(1.0 + margin * cfg.r_t, t_window - margin * cfg.r_t, cfg.pt_s),
            arc: (0..cfg.pt_arc).map(|i| circ * i as f64 / cfg.pt_arc as f64).collect(),
            angle: lin(-cfg.max_angle, cfg.max_angle, cfg.pt_angles),
        }
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.s[1] - self.s[0], self.arc[1] - self.arc[0], self.angle[1] - self.angle[0]]
    }

    pub fn len(&self) -> usize {
        self.s.len() * self.arc.len() * self.angle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the flat index (s fastest-varying last).
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let na = self.angle.len();
        let nl = self.arc.len();
        [self.s[idx / (nl * na)], self.arc[(idx / na) % nl], self.angle[idx % na]]
    }
}

/// Pass point at `(s, arc length, angle to the inward normal)`.
pub fn pass_point(metric: &MetricField, c: [f64; 3]) -> PassPoint {
    let y = metric.domain.boundary_point(c[1]);
    PassPoint { s: c[0], y, eta: rotate(metric.domain.inward_normal(y), c[2]) }
}

/// Source of `β_ε` values for every anchor and ladder entry.
pub trait BetaSource: Sync {
    fn ladder(&self) -> &[f64];

    /// `β_ε` with its standard error for ladder entry `k`.
    fn beta(&self, pgb: usize, tf: &TestFunction, k: usize) -> Result<(Complex64, f64)>;
}

/// Quadrature against the formal beams on a fine lattice per `ε`.
pub struct OracleSource {
    metric: MetricField,
    ladder: Vec<f64>,
    lattices: Vec<NoiseLattice>,
    /// `traces[pgb][k]`.
    traces: Vec<Vec<LatticeFn>>,
}

impl OracleSource {
    pub fn new(metric: &MetricField, beams: &[GaussianBeam], ladder: &[f64], t_window: f64) -> Self {
        let lattices: Vec<NoiseLattice> = ladder.iter().map(|&e| fine_lattice(e, t_window, &metric.domain)).collect();
        let traces = beams
            .par_iter()
            .map(|b| ladder.iter().zip(&lattices).map(|(&e, lat)| formal_beam_on_lattice(b, lat, e)).collect())
            .collect();
        OracleSource { metric: *metric, ladder: ladder.to_vec(), lattices, traces }
    }
}

impl BetaSource for OracleSource {
    fn ladder(&self) -> &[f64] {
        &self.ladder
    }

    fn beta(&self, pgb: usize, tf: &TestFunction, k: usize) -> Result<(Complex64, f64)> {
        let lat = &self.lattices[k];
        let yf = &self.traces[pgb][k];
        let (s0, s1, c0, c1) = test_support_box(&self.metric, tf, lat);
        if !yf.touches((s0, s1), c0, c1) {
            return Ok((Complex64::new(0.0, 0.0), 0.0));
        }
        let xf = test_on_lattice(&self.metric, tf, lat, self.ladder[k]);
        Ok((beta_quadrature(&xf, yf), 0.0))
    }
}

/// Ergodic averages over windows and seeds, with `Y^j` formed from the
/// measurement, the background solve and the exterior reconstruction.
pub struct DataSource {
    metric: MetricField,
    ladder: Vec<f64>,
    lattice: NoiseLattice,
    seeds: Vec<u64>,
    n_windows: usize,
    /// `y[pgb][k][seed][j − 1]`.
    y: Vec<Vec<Vec<Vec<Complex64>>>>,
}

impl DataSource {
    pub fn new(cfg: &ExperimentConfig, grid: &Grid, beams: &[GaussianBeam]) -> Result<Self> {
        let ladder = cfg.eps_ladder.clone();
        let data: Vec<Vec<BeamInitialData>> = beams
            .iter()
            .map(|b| ladder.iter().map(|&e| crate::beams::beam_to_initial_data(b, e, grid)).collect())
            .collect::<Result<_>>()?;
        let mut nodes: Vec<usize> = data.iter().flatten().flat_map(|d| d.re.nodes.iter().copied()).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let a = grid.sample_metric(&cfg.metric);
        let background = cfg.metric.background();
        let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| cfg.first_seed + i).collect();
        let per_seed: Vec<Vec<Vec<Vec<Complex64>>>> = seeds
            .par_iter()
            .map(|&seed| {
                let w = sample(seed, grid.lattice, cfg.n_windows);
                let m = measurement(grid, &cfg.metric, &background, &w, cfg.n_windows, &nodes, false)?;
                data.iter()
                    .map(|per_eps| {
                        per_eps
                            .iter()
                            .zip(&ladder)
                            .map(|(d, &e)| {
                                (0..cfg.n_windows)
                                    .map(|j| {
                                        let inc = restrict(&m.incoming[j], &d.re.nodes);
                                        let ext = restrict(&m.exterior[j], &d.re.nodes);
                                        y_sample_data(grid, &a, &inc, &ext, d, e)
                                    })
                                    .collect::<Result<Vec<_>>>()
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        // reorder to [pgb][k][seed][j]
        let y = (0..beams.len())
            .map(|p| (0..ladder.len()).map(|k| per_seed.iter().map(|s| s[p][k].clone()).collect()).collect())
            .collect();
        Ok(DataSource { metric: cfg.metric, ladder, lattice: grid.lattice, seeds, n_windows: cfg.n_windows, y })
    }
}

impl BetaSource for DataSource {
    fn ladder(&self) -> &[f64] {
        &self.ladder
    }

    fn beta(&self, pgb: usize, tf: &TestFunction, k: usize) -> Result<(Complex64, f64)> {
        let xf = test_on_lattice(&self.metric, tf, &self.lattice, self.ladder[k]);
        let per_seed: Vec<Complex64> = self
            .seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let w = sample(seed, self.lattice, self.n_windows);
                let ys = &self.y[pgb][k][i];
                let z: Vec<Complex64> = (1..=self.n_windows).map(|j| x_sample(&w, &xf, j) * ys[j - 1]).collect();
                stats::complex_mean(&z)
            })
            .collect();
        let se = if per_seed.len() > 1 { stats::complex_std_error(&per_seed) } else { 0.0 };
        Ok((stats::complex_mean(&per_seed), se))
    }
}

/// `β` extrapolated from a ladder of `β_ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaLimit {
    pub value: Complex64,
    pub error_bar: f64,
    /// Richardson values from consecutive ladder pairs.
    pub extrapolations: Vec<Complex64>,
}

/// Richardson extrapolation assuming `β_ε = β + O(ε)`. The error bar adds
/// the change between the last two extrapolations to the propagated
/// statistical error in quadrature.
pub fn beta_limit(eps: &[f64], values: &[Complex64], se: &[f64]) -> Result<BetaLimit> {
    let n = eps.len();
    if n < 2 || values.len() != n || se.len() != n {
        return Err(Error::Invalid("ladder needs at least two matching entries".into()));
    }
    let scale = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for k in 0..n.saturating_sub(2) {
        let d0 = (values[k + 1] - values[k]).norm();
        let d1 = (values[k + 2] - values[k + 1]).norm();
        let noise = 4.0 * (se[k] + se[k + 1] + se[k + 2]) + 1e-9 * scale;
        if d1 > 2.0 * d0 + noise {
            return Err(Error::Inconsistent(format!(
                "|Δβ| grows from {d0:.3e} to {d1:.3e} between eps = {} and {}",
                eps[k], eps[k + 2]
            )));
        }
    }
    let rich = |k: usize| (eps[k] * values[k + 1] - eps[k + 1] * values[k]) / (eps[k] - eps[k + 1]);
    let extrapolations: Vec<Complex64> = (0..n - 1).map(rich).collect();
    let last = n - 2;
    let stat = ((eps[last] * se[last + 1]).powi(2) + (eps[last + 1] * se[last]).powi(2)).sqrt() / (eps[last] - eps[last + 1]);
    let resid = if last > 0 {
        (extrapolations[last] - extrapolations[last - 1]).norm()
    } else {
        (values[1] - values[0]).norm()
    };
    Ok(BetaLimit { value: extrapolations[last], error_bar: resid.hypot(stat), extrapolations })
}

/// Outcome for one anchor.
#[derive(Debug, Clone)]
pub struct AnchorResult {
    pub pgb_id: usize,
    pub anchor: BeamAnchor,
    /// `|β_ε|` over the pt grid at the largest `ε` (NaN where no test function exists).
    pub coarse: Vec<f64>,
    pub coarse_argmax: usize,
    pub median: f64,
    /// Refined `(s, arc length, angle)`.
    pub refined: [f64; 3],
    pub limit: Option<BetaLimit>,
    pub ladder: Vec<Complex64>,
    pub threshold: f64,
    pub detected: bool,
    pub reason: Option<String>,
    pub truth: ScatteringRecord,
    /// `(τ, exit arc length, exit angle)` implied by the detection.
    pub recovered: [f64; 3],
}

impl AnchorResult {
    /// `(|Δτ|/τ, exit arc error in cells, exit angle error in cells)`.
    pub fn errors(&self, metric: &MetricField, grid: &PtGrid) -> [f64; 3] {
        let disk = &metric.domain;
        let sp = grid.spacing();
        let circ = disk.circumference();
        let t = truth_coordinates(metric, &self.truth);
        let mut d_arc = (self.recovered[1] - t[1]).rem_euclid(circ);
        d_arc = d_arc.min(circ - d_arc);
        [(self.recovered[0] - t[0]).abs() / t[0], d_arc / sp[1], (self.recovered[2] - t[2]).abs() / sp[2]]
    }

    pub fn matches(&self, metric: &MetricField, grid: &PtGrid) -> bool {
        let e = self.errors(metric, grid);
        self.detected && e[0] <= 0.02 && e[1] <= 2.0 && e[2] <= 2.0
    }
}

/// `(τ, exit arc length, inward angle of the reversed exit direction)`.
pub fn truth_coordinates(metric: &MetricField, rec: &ScatteringRecord) -> [f64; 3] {
    let disk = &metric.domain;
    [rec.tau, disk.arc_length_of(rec.exit.x), disk.angle_to_inward_normal(rec.exit.x, -rec.exit.xi)]
}

/// Full recovery output.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub t_window: f64,
    pub grid: PtGrid,
    pub metric: MetricField,
    pub anchors: Vec<AnchorResult>,
}

impl RecoveryReport {
    pub fn n_matched(&self) -> usize {
        self.anchors.iter().filter(|a| a.matches(&self.metric, &self.grid)).count()
    }
}

/// Scan context for one anchor. Pass points whose support contains the
/// beam's exit event `(t_out, x_out)` are masked: that event is known from
/// the exterior, and on `∂M` the outgoing beam matches the mirrored inward
/// test direction.
struct Scan<'a> {
    src: &'a dyn BetaSource,
    metric: MetricField,
    cfg: &'a ExperimentConfig,
    pgb: usize,
    t_window: f64,
    exit: (f64, Vec2),
}

fn abs_beta(scan: &Scan, c: [f64; 3], k: usize) -> f64 {
    let Scan { src, metric, cfg, pgb, t_window, exit } = *scan;
    let metric = &metric;
    if (c[0] - exit.0).abs() < cfg.r_t && (metric.domain.boundary_point(c[1]) - exit.1).norm() < cfg.r_x {
        return f64::NAN;
    }
    match make_test(metric, pass_point(metric, c), t_window, cfg.r_t, cfg.r_x) {
        Ok(tf) => src.beta(pgb, &tf, k).map(|b| b.0.norm()).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Local maximization of `log|β_ε|`: sample a `3×3×3` stencil, fit a full
/// quadratic and jump to its vertex when it is a maximum inside the
/// stencil, otherwise to the best sample. Repeated a few times.
fn refine(scan: &Scan, start: [f64; 3], steps: [f64; 3], k: usize) -> [f64; 3] {
    let offsets: Vec<[f64; 3]> = (0..27).map(|i| [(i / 9) as f64 - 1.0, ((i / 3) % 3) as f64 - 1.0, (i % 3) as f64 - 1.0]).collect();
    let at = |c: [f64; 3], o: [f64; 3]| [c[0] + o[0] * steps[0], c[1] + o[1] * steps[1], c[2] + o[2] * steps[2]];
    let log_abs = |p: [f64; 3]| {
        let v = abs_beta(scan, p, k);
        if v.is_finite() && v > 0.0 { v.ln() } else { f64::NEG_INFINITY }
    };
    let mut c = start;
    for _ in 0..8 {
        let logs: Vec<f64> = offsets.par_iter().map(|&o| log_abs(at(c, o))).collect();
        let best = (0..27).max_by(|&a, &b| logs[a].total_cmp(&logs[b])).unwrap();
        if logs[best] == f64::NEG_INFINITY {
            break;
        }
        // the fitted vertex is only taken when it beats every sample
        let vertex = quadratic_vertex(&offsets, &logs)
            .filter(|v| v.iter().all(|x| x.abs() <= 1.0))
            .filter(|&v| log_abs(at(c, v)) >= logs[best]);
        match vertex {
            Some(v) => {
                c = at(c, v);
                break;
            }
            None if best == 13 => break,
            None => c = at(c, offsets[best]),
        }
    }
    c
}

/// Vertex of the least-squares quadratic through the finite samples, if the
/// fitted Hessian is negative definite.
fn quadratic_vertex(points: &[[f64; 3]], values: &[f64]) -> Option<[f64; 3]> {
    let rows: Vec<usize> = (0..points.len()).filter(|&i| values[i].is_finite()).collect();
    if rows.len() < 10 {
        return None;
    }
    let basis = |p: &[f64; 3]| [1.0, p[0], p[1], p[2], p[0] * p[0], p[1] * p[1], p[2] * p[2], p[0] * p[1], p[0] * p[2], p[1] * p[2]];
    let a = nalgebra::DMatrix::from_fn(rows.len(), 10, |r, j| basis(&points[rows[r]])[j]);
    let b = nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|&i| values[i]));
    let coef = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let hess = nalgebra::Matrix3::new(
        2.0 * coef[4], coef[7], coef[8],
        coef[7], 2.0 * coef[5], coef[9],
        coef[8], coef[9], 2.0 * coef[6],
    );
    if hess.symmetric_eigenvalues().iter().any(|&e| e >= 0.0) {
        return None;
    }
    let grad = nalgebra::Vector3::new(coef[1], coef[2], coef[3]);
    let v = hess.lu().solve(&(-grad))?;
    Some([v[0], v[1], v[2]])
}

/// Scan, refine and extrapolate for every anchor, then compare with the
/// geodesic oracle. Anchors whose beams miss `M` are skipped.
pub fn scan_and_recover(cfg: &ExperimentConfig, src: &dyn BetaSource, beams: &[GaussianBeam], t_window: f64) -> Result<RecoveryReport> {
    let metric = cfg.metric;
    let grid = PtGrid::new(cfg, t_window);
    let opts = cfg.geodesic_options();
    let ladder = src.ladder().to_vec();
    let mut anchors = Vec::new();
    for (pgb, beam) in beams.iter().enumerate() {
        let exit = (beam.crossings.t_out, beam.crossings.entry_from_anchor.x);
        let scan = Scan { src, metric, cfg, pgb, t_window, exit };
        let coarse: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| abs_beta(&scan, grid.coords(i), 0))
            .collect();
        let valid: Vec<f64> = coarse.iter().copied().filter(|v| v.is_finite()).collect();
        let arg = (0..coarse.len())
            .filter(|&i| coarse[i].is_finite())
            .max_by(|&a, &b| coarse[a].total_cmp(&coarse[b]))
            .ok_or(Error::NoDetection(pgb))?;
        let mut sorted = valid.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let mut c = grid.coords(arg);
        let sp = grid.spacing();
        for k in 0..ladder.len() {
            let f = 0.5 * 0.5f64.sqrt().powi(k as i32);
            c = refine(&scan, c, [sp[0] * f, sp[1] * f, sp[2] * f], k);
        }
        let (last, f) = (ladder.len() - 1, 0.125 * 0.5f64.sqrt().powi(ladder.len() as i32 - 1));
        c = refine(&scan, c, [sp[0] * f, sp[1] * f, sp[2] * f], last);
        let entry = beam.crossings.entry_from_anchor;
        let truth = scattering_relation(&metric, &entry, &opts)?;
        let mut result = AnchorResult {
            pgb_id: pgb,
            anchor: beam.anchor,
            coarse,
            coarse_argmax: arg,
            median,
            refined: c,
            limit: None,
            ladder: Vec::new(),
            threshold: f64::NAN,
            detected: false,
            reason: None,
            truth,
            recovered: [t_window - beam.crossings.r - c[0], c[1].rem_euclid(metric.domain.circumference()), c[2]],
        };
        let tf = make_test(&metric, pass_point(&metric, c), t_window, cfg.r_t, cfg.r_x);
        match tf {
            Err(e) => result.reason = Some(e.to_string()),
            Ok(tf) => {
                let pairs = (0..ladder.len()).map(|k| src.beta(pgb, &tf, k)).collect::<Result<Vec<_>>>()?;
                // the registration error d of the refined pass point adds a
                // phase e^{i q·d/ε} that spins along the ladder, so the
                // modulus is extrapolated
                let moduli: Vec<Complex64> = pairs.iter().map(|p| Complex64::from(p.0.norm())).collect();
                let se: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                result.ladder = pairs.iter().map(|p| p.0).collect();
                match beta_limit(&ladder, &moduli, &se) {
                    Ok(lim) => {
                        result.threshold = cfg.theta_factor * lim.error_bar;
                        let peak = result.coarse[arg];
                        let prominent = peak >= cfg.prominence * median;
                        result.detected = lim.value.norm() >= result.threshold && prominent && lim.value.norm() > 0.0;
                        if !result.detected {
                            result.reason = Some(if prominent { "below threshold".into() } else { "peak not prominent".into() });
                        }
                        result.limit = Some(lim);
                    }
                    Err(e) => result.reason = Some(e.to_string()),
                }
            }
        }
        anchors.push(result);
    }
    Ok(RecoveryReport { t_window, grid, metric, anchors })
}

/// Beams for every anchor that enters `M`; anchors that miss are dropped with a note.
pub fn build_beams(cfg: &ExperimentConfig, t_window: f64) -> (Vec<GaussianBeam>, Vec<String>) {
    let opts = cfg.beam_options();
    let mut beams = Vec::new();
    let mut notes = Vec::new();
    for (i, a) in cfg.anchor_list(t_window).into_iter().enumerate() {
        let c = cfg.beam_waist.unwrap_or_else(|| (a.z - cfg.metric.domain.center).norm());
        let h_end = crate::beams::default_end_hessian() * (Complex64::new(c, -cfg.beam_rayleigh).inv() / Complex64::i());
        match init_beam(&cfg.metric, a, h_end, &opts) {
            Ok(b) => beams.push(b),
            Err(e) => notes.push(format!("anchor {i}: {e}")),
        }
    }
    (beams, notes)
}

/// Wave grid for data mode.
pub fn data_grid(cfg: &ExperimentConfig, t_window: f64) -> Result<Grid> {
    let spec = GridSpec::for_domain(&cfg.metric.domain, cfg.grid_h);
    let a_max = cfg.metric.bump.amplitude.abs() + 1.0;
    Grid::new(spec, cfg.metric.domain, a_max, t_window)
}

/// Run the whole pipeline for `cfg`.
pub fn run_recovery(cfg: &ExperimentConfig) -> Result<(RecoveryReport, Vec<String>)> {
    let t_window = cfg.window_length()?;
    let (beams, notes) = build_beams(cfg, t_window);
    let report = match cfg.mode {
        Mode::Oracle => {
            let src = OracleSource::new(&cfg.metric, &beams, &cfg.eps_ladder, t_window);
            scan_and_recover(cfg, &src, &beams, t_window)?
        }
        Mode::Data => {
            let grid = data_grid(cfg, t_window)?;
            let src = DataSource::new(cfg, &grid, &beams)?;
            scan_and_recover(cfg, &src, &beams, t_window)?
        }
    };
    Ok((report, notes))
}

/// Write `sigma_recovered.csv`, `sigma_truth.csv`, `beta_scan_<pgb>.csv`,
/// `beta_scan_<pgb>.dat` and `summary.txt` into `dir`.
pub fn write_outputs(report: &RecoveryReport, notes: &[String], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metric = &report.metric;
    let mut rec = String::from("pgb_id,detected,s,entry_arc,entry_angle,tau,exit_arc,exit_angle,re_beta,im_beta,error_bar,peak_over_median\n");
    let mut truth = String::from("pgb_id,entry_arc,entry_angle,tau,exit_arc,exit_angle\n");
    for a in &report.anchors {
        let (b, err) = a.limit.as_ref().map_or((Complex64::new(f64::NAN, f64::NAN), f64::NAN), |l| (l.value, l.error_bar));
        let entry = a.truth.entry;
        let entry_arc = metric.domain.arc_length_of(entry.x);
        let entry_angle = metric.domain.angle_to_inward_normal(entry.x, entry.xi);
        let _ = writeln!(
            rec,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.3e},{:.3e}",
            a.pgb_id, a.detected, a.refined[0], entry_arc, entry_angle, a.recovered[0], a.recovered[1], a.recovered[2],
            b.re, b.im, err, a.coarse[a.coarse_argmax] / a.median
        );
        let t = truth_coordinates(metric, &a.truth);
        let _ = writeln!(truth, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", a.pgb_id, entry_arc, entry_angle, t[0], t[1], t[2]);
        let mut scan = String::from("s,arc,angle,abs_beta\n");
        for (i, v) in a.coarse.iter().enumerate() {
            let c = report.grid.coords(i);
            let _ = writeln!(scan, "{:.6},{:.6},{:.6},{:.6e}", c[0], c[1], c[2], v);
        }
        std::fs::write(dir.join(format!("beta_scan_{}.csv", a.pgb_id)), scan)?;
        // max over s of |β| on the (arc, angle) plane, gnuplot block format
        let mut dat = String::from("# arc angle max_s|beta|\n");
        let g = &report.grid;
        for (ia, arc) in g.arc.iter().enumerate() {
            for (ig, ang) in g.angle.iter().enumerate() {
                let m = (0..g.s.len())
                    .map(|is| a.coarse[(is * g.arc.len() + ia) * g.angle.len() + ig])
                    .filter(|v| v.is_finite())
                    .fold(0.0, f64::max);
                let _ = writeln!(dat, "{arc:.6} {ang:.6} {m:.6e}");
            }
            dat.push('\n');
        }
        std::fs::write(dir.join(format!("beta_scan_{}.dat", a.pgb_id)), dat)?;
    }
    std::fs::write(dir.join("sigma_recovered.csv"), rec)?;
    std::fs::write(dir.join("sigma_truth.csv"), truth)?;
    std::fs::write(dir.join("summary.txt"), summary(report, notes))?;
    Ok(())
}

/// Human-readable summary.
pub fn summary(report: &RecoveryReport, notes: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "window T = {:.4}", report.t_window);
    let _ = writeln!(out, "anchors: {}  matched: {}", report.anchors.len(), report.n_matched());
    for a in &report.anchors {
        let e = a.errors(&report.metric, &report.grid);
        let _ = writeln!(
            out,
            "pgb {}: detected={} tau_rel_err={:.4} exit_arc_cells={:.2} exit_angle_cells={:.2}{}",
            a.pgb_id,
            a.detected,
            e[0],
            e[1],
            e[2],
            a.reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default()
        );
    }
    for n in notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_numbers() {
        let cfg = ExperimentConfig::parse("# comment\nmetric = euclidean\n\neps_ladder = 0.04, 0.02 # two\n").unwrap();
        assert!(cfg.metric.is_euclidean());
        assert_eq!(cfg.eps_ladder, vec![0.04, 0.02]);
        let err = ExperimentConfig::parse("pt_s = 12\nbogus = 1\n").unwrap_err();
        assert_eq!(err, Error::Config { line: 2, message: "unknown key `bogus`".into() });
        let err = ExperimentConfig::parse("grid_h = abc").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        assert!(ExperimentConfig::parse("eps_ladder = 0.02, 0.04").is_err());
        assert!(matches!(ExperimentConfig::parse("seeds = 1\nseeds = 2").unwrap_err(), Error::Config { line: 2, .. }));
    }

    #[test]
    fn explicit_anchors_are_kept() {
        let cfg = ExperimentConfig::parse("anchor = 2.3, 0, -1, 0\nanchor = 0, 2.3, 0, -2").unwrap();
        let a = cfg.anchor_list(10.0);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].zeta, Vec2::new(0.0, -1.0));
    }

    #[test]
    fn richardson_recovers_linear_model() {
        let eps = [0.08, 0.04, 0.02, 0.01];
        let b = Complex64::new(1.2, -0.4);
        let c = Complex64::new(3.0, 1.0);
        let vals: Vec<Complex64> = eps.iter().map(|&e| b + c * e).collect();
        let lim = beta_limit(&eps, &vals, &[0.0; 4]).unwrap();
        assert!((lim.value - b).norm() < 1e-12);
        assert!(lim.error_bar < 1e-12);
        // a quadratic term shows up in the error bar, which shrinks with it
        let vals2: Vec<Complex64> = eps.iter().map(|&e| b + c * e + 20.0 * e * e).collect();
        let lim2 = beta_limit(&eps, &vals2, &[0.0; 4]).unwrap();
        assert!((lim2.value - b).norm() <= 2.0 * lim2.error_bar);
    }

    #[test]
    fn growing_differences_are_inconsistent() {
        let eps = [0.08, 0.04, 0.02];
        let vals = [Complex64::new(1.0, 0.0), Complex64::new(1.01, 0.0), Complex64::new(2.0, 0.0)];
        assert!(matches!(beta_limit(&eps, &vals, &[0.0; 3]), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn quadratic_vertex_of_shifted_peak() {
        let pts: Vec<[f64; 3]> = (0..27).map(|i| [(i / 9) as f64 - 1.0, ((i / 3) % 3) as f64 - 1.0, (i % 3) as f64 - 1.0]).collect();
        // correlated ridge with its maximum at (0.3, -0.2, 0.1)
        let f = |p: &[f64; 3]| {
            let d = [p[0] - 0.3, p[1] + 0.2, p[2] - 0.1];
            -(d[0] * d[0] + 2.0 * d[1] * d[1] + d[2] * d[2] + 1.6 * d[0] * d[1])
        };
        let vals: Vec<f64> = pts.iter().map(f).collect();
        let v = quadratic_vertex(&pts, &vals).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-10 && (v[1] + 0.2).abs() < 1e-10 && (v[2] - 0.1).abs() < 1e-10);
        let convex: Vec<f64> = vals.iter().map(|v| -v).collect();
        assert!(quadratic_vertex(&pts, &convex).is_none());
    }

    #[test]
    fn pt_grid_respects_time_margins() {
        let cfg = ExperimentConfig::default();
        let g = PtGrid::new(&cfg, 10.0);
        assert_eq!(g.len(), 32 * 16 * 24);
        assert!(g.s[0] > 1.0 + cfg.r_t && *g.s.last().unwrap() < 10.0 - cfg.r_t);
        let c = g.coords(g.len() - 1);
        assert_eq!(c, [*g.s.last().unwrap(), *g.arc.last().unwrap(), *g.angle.last().unwrap()]);
    }
}

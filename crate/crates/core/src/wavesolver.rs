//! Leapfrog solver for `∂_t²u − a⁻¹Δu = F` on a square box with a sponge layer.
//!
//! In two dimensions `Δ_g = a⁻¹Δ` for `g = a·δ`, so the conservative flux
//! form reduces to the 5-point Laplacian divided by `a`. The damped update
//!
//! ```text
//! (u⁺ − 2u + u⁻)/dt² + σ (u⁺ − u⁻)/(2dt) = Lu/a + F
//! ```
//!
//! is run backward in time by swapping the roles of `u⁺` and `u⁻`, which
//! turns the sponge into the time reversed one. With sources deposited by the
//! adjoint of the bilinear trace interpolation, the discrete Green identity
//!
//! ```text
//! dt Σₙ Σ a h² Fⁿ wⁿ = Σ a h² (∂ₜu·w − u·∂ₜw)|_{n=N}
//! ```
//!
//! then holds to roundoff whenever `σ = 0` on the support of `w^N, w^{N+1}`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Disk, MetricField, Vec2};
use crate::noise::{NoiseLattice, NoiseRealization};
use crate::smooth::smoothstep;

/// Box, resolution and sponge parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub h: f64,
    pub sponge_width: f64,
    pub sponge_strength: f64,
    /// Target `dt·√(max a)/h`; must not exceed 0.5.
    pub cfl: f64,
}

impl GridSpec {
    /// `L_box = 4R`, sponge in the outer `0.5R`.
    pub fn for_domain(domain: &Disk, h: f64) -> Self {
        GridSpec {
            half_width: 4.0 * domain.radius,
            h,
            sponge_width: 0.5 * domain.radius,
            sponge_strength: 40.0,
            cfl: 0.45,
        }
    }
}

/// Bilinear interpolation stencil: four `(node, weight)` pairs.
pub type Stencil = [(usize, f64); 4];

/// Node layout, time step, sponge profile and the `∂M` lattice.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    /// Nodes per side.
    pub n: usize,
    pub dt: f64,
    pub steps_per_window: usize,
    pub domain: Disk,
    pub sigma: Vec<f64>,
    pub lattice: NoiseLattice,
    /// Interpolation stencil of each boundary lattice point.
    pub boundary: Vec<Stencil>,
}

impl Grid {
    /// Grid whose time step divides `t_window` and satisfies the CFL target
    /// for `max a = a_max`.
    pub fn new(spec: GridSpec, domain: Disk, a_max: f64, t_window: f64) -> Result<Grid> {
        if spec.cfl > 0.5 {
            return Err(Error::Cfl { dt: spec.cfl * spec.h / a_max.sqrt(), limit: 0.5 * spec.h / a_max.sqrt() });
        }
        let dt_target = spec.cfl * spec.h / a_max.sqrt();
        let steps_per_window = (t_window / dt_target).ceil() as usize;
        let dt = t_window / steps_per_window as f64;
        let n = (2.0 * spec.half_width / spec.h).round() as usize + 1;
        let h = 2.0 * spec.half_width / (n - 1) as f64;
        let spec = GridSpec { h, ..spec };
        let mut sigma = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let x = Self::coord(&spec, i, j);
                let depth = x.x.abs().max(x.y.abs()) - (spec.half_width - spec.sponge_width);
                if depth > 0.0 {
                    sigma[j * n + i] = spec.sponge_strength * (depth / spec.sponge_width).powi(2);
                }
            }
        }
        let circ = domain.circumference();
        let n_ell = (circ / h).round() as usize;
        let d_ell = circ / n_ell as f64;
        let lattice = NoiseLattice { dt, steps_per_window, n_ell, d_ell };
        let mut grid = Grid { spec, n, dt, steps_per_window, domain, sigma, lattice, boundary: Vec::new() };
        grid.boundary = (0..n_ell).map(|c| grid.stencil(domain.boundary_point(c as f64 * d_ell))).collect();
        Ok(grid)
    }

    fn coord(spec: &GridSpec, i: usize, j: usize) -> Vec2 {
        Vec2::new(-spec.half_width + i as f64 * spec.h, -spec.half_width + j as f64 * spec.h)
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn node(&self, k: usize) -> Vec2 {
        Self::coord(&self.spec, k % self.n, k / self.n)
    }

    pub fn window_length(&self) -> f64 {
        self.dt * self.steps_per_window as f64
    }

    /// Bilinear stencil at `x`.
    pub fn stencil(&self, x: Vec2) -> Stencil {
        let h = self.spec.h;
        let fx = (x.x + self.spec.half_width) / h;
        let fy = (x.y + self.spec.half_width) / h;
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        let (sx, sy) = (fx - i as f64, fy - j as f64);
        let k = j * self.n + i;
        [
            (k, (1.0 - sx) * (1.0 - sy)),
            (k + 1, sx * (1.0 - sy)),
            (k + self.n, (1.0 - sx) * sy),
            (k + self.n + 1, sx * sy),
        ]
    }

    pub fn interpolate(&self, field: &[f64], x: Vec2) -> f64 {
        self.stencil(x).iter().map(|&(k, w)| w * field[k]).sum()
    }

    /// Values of `field` at the boundary lattice.
    pub fn trace(&self, field: &[f64]) -> Vec<f64> {
        self.boundary.iter().map(|st| st.iter().map(|&(k, w)| w * field[k]).sum()).collect()
    }

    /// Node values of the metric factor.
    pub fn sample_metric(&self, metric: &MetricField) -> Vec<f64> {
        (0..self.len()).map(|k| metric.a(self.node(k))).collect()
    }

    /// Deposit `Σ_c values_c Δℓ δ_{ℓ_c}` as a node density w.r.t. `a·dx`,
    /// adding `scale·(...)` into `out`. This is the adjoint of [`Grid::trace`].
    pub fn deposit(&self, values: &[f64], scale: f64, a: &[f64], out: &mut [f64]) {
        let c = scale * self.lattice.d_ell / (self.spec.h * self.spec.h);
        for (st, v) in self.boundary.iter().zip(values) {
            for &(k, w) in st {
                out[k] += c * v * w / a[k];
            }
        }
    }
}

/// `χ₊(t)`: 0 for `t ≤ 0`, 1 for `t ≥ 1`.
pub fn chi_plus(t: f64) -> f64 {
    smoothstep(t)
}

/// Two consecutive time levels. `cur` is level `step`, `prev` level
/// `step ∓ 1` depending on the direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub prev: Vec<f64>,
    pub cur: Vec<f64>,
    pub step: i64,
}

impl WaveState {
    pub fn zeros(len: usize) -> Self {
        WaveState { prev: vec![0.0; len], cur: vec![0.0; len], step: 0 }
    }
}

/// Which nodes are updated and how the rest are filled.
#[derive(Debug, Clone)]
enum Region {
    Full,
    Exterior(ExteriorBoundary),
}

/// One leapfrog solver bound to a grid and a metric.
#[derive(Debug, Clone)]
pub struct Solver<'g> {
    pub grid: &'g Grid,
    pub a: Vec<f64>,
    region: Region,
    /// Every `check_every` steps the field is scanned for NaN/overflow.
    pub check_every: usize,
}

/// Time direction of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl<'g> Solver<'g> {
    pub fn new(grid: &'g Grid, metric: &MetricField) -> Self {
        Solver { grid, a: grid.sample_metric(metric), region: Region::Full, check_every: 64 }
    }

    /// Solver on `box \ M` with Dirichlet data on `∂M` (ghost-node extrapolation).
    pub fn exterior(grid: &'g Grid, metric: &MetricField) -> Self {
        Solver {
            grid,
            a: grid.sample_metric(metric),
            region: Region::Exterior(ExteriorBoundary::new(grid)),
            check_every: 64,
        }
    }

    /// One step. `source` is a node density added to the right-hand side;
    /// `dirichlet` is the boundary-lattice data at the new level (exterior
    /// solvers only).
    pub fn step(&self, state: &mut WaveState, source: Option<&[f64]>, dirichlet: Option<&[f64]>, dir: Direction) -> Result<()> {
        let g = self.grid;
        let n = g.n;
        let (h2, dt) = (g.spec.h * g.spec.h, g.dt);
        let dt2 = dt * dt;
        let mut next = std::mem::take(&mut state.prev);
        let cur = &state.cur;
        let active = match &self.region {
            Region::Full => None,
            Region::Exterior(ext) => Some(&ext.active),
        };
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let k = j * n + i;
                if let Some(mask) = active {
                    if !mask[k] {
                        continue;
                    }
                }
                let lap = (cur[k - 1] + cur[k + 1] + cur[k - n] + cur[k + n] - 4.0 * cur[k]) / h2;
                let mut rhs = lap / self.a[k];
                if let Some(f) = source {
                    rhs += f[k];
                }
                let damp = 0.5 * g.sigma[k] * dt;
                next[k] = (2.0 * cur[k] - (1.0 - damp) * next[k] + dt2 * rhs) / (1.0 + damp);
            }
        }
        if let Region::Exterior(ext) = &self.region {
            let zero;
            let data = match dirichlet {
                Some(d) => d,
                None => {
                    zero = vec![0.0; g.lattice.n_ell];
                    &zero
                }
            };
            ext.fill_ghosts(g, &mut next, data);
        }
        state.prev = std::mem::replace(&mut state.cur, next);
        state.step += if dir == Direction::Forward { 1 } else { -1 };
        if self.check_every > 0 && state.step.unsigned_abs() as usize % self.check_every == 0 {
            if state.cur.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
                return Err(Error::Unstable { step: state.step.unsigned_abs() as usize });
            }
        }
        Ok(())
    }

    /// Discrete energy between the two stored levels (conserved by the
    /// undamped scheme): `½Σ a h² ((u⁺−u)/dt)² − ½Σ h² u⁺·Lu`.
    pub fn energy(&self, state: &WaveState) -> f64 {
        let g = self.grid;
        let n = g.n;
        let (h2, dt) = (g.spec.h * g.spec.h, g.dt);
        let (u0, u1) = (&state.prev, &state.cur);
        let mut kin = 0.0;
        let mut pot = 0.0;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let k = j * n + i;
                let d = (u1[k] - u0[k]) / dt;
                kin += self.a[k] * d * d;
                let lap = u0[k - 1] + u0[k + 1] + u0[k - n] + u0[k + n] - 4.0 * u0[k];
                pot -= u1[k] * lap;
            }
        }
        0.5 * (kin * h2 + pot)
    }
}

/// Ghost-node data for the exterior Dirichlet problem.
#[derive(Debug, Clone)]
struct ExteriorBoundary {
    active: Vec<bool>,
    ghosts: Vec<Ghost>,
}

#[derive(Debug, Clone)]
struct Ghost {
    node: usize,
    /// Arclength of the boundary projection, in lattice units.
    arc_cells: f64,
    /// Depth of the ghost inside `M`.
    depth: f64,
    /// Stencil of the probe point at distance `probe` outside `∂M`.
    probe: Stencil,
    probe_dist: f64,
}

impl ExteriorBoundary {
    fn new(grid: &Grid) -> Self {
        let n = grid.n;
        let disk = grid.domain;
        let active: Vec<bool> = (0..grid.len())
            .map(|k| {
                let (i, j) = (k % n, k / n);
                i > 0 && j > 0 && i < n - 1 && j < n - 1 && !disk.contains(grid.node(k))
            })
            .collect();
        let h = grid.spec.h;
        let probe_dist = 2.0 * h;
        let mut ghosts = Vec::new();
        for k in 0..grid.len() {
            let x = grid.node(k);
            if !disk.contains(x) {
                continue;
            }
            let (i, j) = (k % n, k / n);
            let near = [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)]
                .iter()
                .any(|&(a, b)| active[b * n + a]);
            if !near {
                continue;
            }
            let rel = x - disk.center;
            let r = rel.norm();
            let dir = rel / r;
            let on = disk.center + dir * disk.radius;
            ghosts.push(Ghost {
                node: k,
                arc_cells: disk.arc_length_of(on) / grid.lattice.d_ell,
                depth: disk.radius - r,
                probe: grid.stencil(on + dir * probe_dist),
                probe_dist,
            });
        }
        ExteriorBoundary { active, ghosts }
    }

    fn fill_ghosts(&self, grid: &Grid, field: &mut [f64], data: &[f64]) {
        let n_ell = grid.lattice.n_ell;
        for gh in &self.ghosts {
            let c0 = gh.arc_cells.floor();
            let s = gh.arc_cells - c0;
            let c0 = (c0 as usize) % n_ell;
            let hb = (1.0 - s) * data[c0] + s * data[(c0 + 1) % n_ell];
            let vp: f64 = gh.probe.iter().map(|&(k, w)| w * field[k]).sum();
            // linear in the normal coordinate through (0, hb) and (probe, vp)
            field[gh.node] = hb - gh.depth * (vp - hb) / gh.probe_dist;
        }
    }
}

/// `(u(T), ∂_t u(T))` on a node set `Ω`, with `∂_t u` the forward difference
/// `(u^{N+1} − u^N)/dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    pub t: f64,
    pub nodes: Vec<usize>,
    pub u: Vec<f64>,
    pub ut: Vec<f64>,
}

impl SnapshotPair {
    /// Restrict the two stored levels of `state` (`prev` = level N, `cur` = N+1) to `nodes`.
    pub fn capture(grid: &Grid, state: &WaveState, nodes: &[usize]) -> Self {
        let u: Vec<f64> = nodes.iter().map(|&k| state.prev[k]).collect();
        let ut = nodes.iter().zip(&u).map(|(&k, u0)| (state.cur[k] - u0) / grid.dt).collect();
        SnapshotPair { t: (state.step - 1) as f64 * grid.dt, nodes: nodes.to_vec(), u, ut }
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.ut).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Scatter `u` back onto a full grid field.
    pub fn to_field(&self, grid: &Grid) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (&k, v) in self.nodes.iter().zip(&self.u) {
            out[k] = *v;
        }
        out
    }

    pub fn add(&self, other: &SnapshotPair) -> SnapshotPair {
        assert_eq!(self.nodes, other.nodes);
        SnapshotPair {
            t: self.t,
            nodes: self.nodes.clone(),
            u: self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
            ut: self.ut.iter().zip(&other.ut).map(|(a, b)| a + b).collect(),
        }
    }
}

/// `Σ a h² (∂_t u·w − u·∂_t w)` over the common node set.
pub fn snapshot_pairing(grid: &Grid, a: &[f64], u: &SnapshotPair, w: &SnapshotPair) -> f64 {
    assert_eq!(u.nodes, w.nodes, "snapshots live on different windows");
    let h2 = grid.spec.h * grid.spec.h;
    u.nodes
        .iter()
        .enumerate()
        .map(|(i, &k)| a[k] * (u.ut[i] * w.u[i] - u.u[i] * w.ut[i]))
        .sum::<f64>()
        * h2
}

/// What a boundary trace records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Full,
    Incoming,
    Scattered,
}

/// Samples on the `(step, cell)` lattice starting at `first_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    pub kind: TraceKind,
    pub seed: Option<u64>,
    pub window: Option<usize>,
    pub first_step: usize,
    pub n_ell: usize,
    pub values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn new(kind: TraceKind, n_ell: usize, first_step: usize) -> Self {
        BoundaryTrace { kind, seed: None, window: None, first_step, n_ell, values: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.n_ell
    }

    pub fn row(&self, step: usize) -> Option<&[f64]> {
        let k = step.checked_sub(self.first_step)?;
        self.values.get(k * self.n_ell..(k + 1) * self.n_ell)
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n_ell);
        self.values.extend_from_slice(row);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `Σ v² dt Δℓ`.
    pub fn l2_squared(&self, lat: &NoiseLattice) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * lat.cell_area()
    }

    /// CSV: `t,arclength,value`.
    pub fn to_csv(&self, lat: &NoiseLattice) -> String {
        let mut out = String::from("t,arclength,value\n");
        for s in 0..self.steps() {
            let t = lat.time(self.first_step + s);
            for c in 0..self.n_ell {
                out.push_str(&format!("{t:.6},{:.6},{:.9e}\n", lat.arc(c), self.values[s * self.n_ell + c]));
            }
        }
        out
    }
}

fn noise_source(grid: &Grid, w: &NoiseRealization, step: usize, a: &[f64], buf: &mut Vec<f64>) -> bool {
    let chi = chi_plus(grid.lattice.time(step));
    buf.iter_mut().for_each(|v| *v = 0.0);
    if chi == 0.0 || step >= w.total_steps() {
        return false;
    }
    grid.deposit(&w.row(step), chi, a, buf);
    true
}

/// Forward solve of `∂_t²U − Δ_g U = χ₊W` from rest over `n_windows` windows.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Snapshot at `t = jT` for `j = 1..=n_windows`.
    pub snapshots: Vec<SnapshotPair>,
    pub trace: Option<BoundaryTrace>,
}

/// Steps the equation with the lattice noise as boundary source.
pub fn solve_forward(
    grid: &Grid,
    metric: &MetricField,
    w: &NoiseRealization,
    n_windows: usize,
    nodes: &[usize],
    keep_trace: bool,
) -> Result<ForwardResult> {
    let solver = Solver::new(grid, metric);
    let mut state = WaveState::zeros(grid.len());
    let mut src = vec![0.0; grid.len()];
    let spw = grid.steps_per_window;
    let mut trace = keep_trace.then(|| BoundaryTrace::new(TraceKind::Full, grid.lattice.n_ell, 0));
    if let Some(tr) = trace.as_mut() {
        tr.seed = Some(w.seed);
        tr.push(&grid.trace(&state.prev));
        tr.push(&grid.trace(&state.cur));
    }
    state.step = 1;
    let mut snapshots = Vec::new();
    while snapshots.len() < n_windows {
        let n = state.step as usize;
        let has = noise_source(grid, w, n, &solver.a, &mut src);
        solver.step(&mut state, has.then_some(&src[..]), None, Direction::Forward)?;
        if let Some(tr) = trace.as_mut() {
            tr.push(&grid.trace(&state.cur));
        }
        if state.step as usize % spw == 1 && state.step > 1 {
            snapshots.push(SnapshotPair::capture(grid, &state, nodes));
        }
    }
    Ok(ForwardResult { snapshots, trace })
}

/// Output of the streamed measurement: the field under `g`, the incoming
/// field under `g0`, and the exterior reconstruction of the scattered part.
#[derive(Debug, Clone)]
pub struct MeasurementResult {
    pub full: Vec<SnapshotPair>,
    pub incoming: Vec<SnapshotPair>,
    pub exterior: Vec<SnapshotPair>,
    pub scattered: Option<BoundaryTrace>,
}

/// Runs the `g` and `g0` forward solves with the same noise, forms
/// `LW = (u − u_in)|_{∂M}` step by step and feeds it to an exterior Dirichlet
/// solve, snapshotting all three at every `jT`.
pub fn measurement(
    grid: &Grid,
    metric: &MetricField,
    background: &MetricField,
    w: &NoiseRealization,
    n_windows: usize,
    nodes: &[usize],
    keep_trace: bool,
) -> Result<MeasurementResult> {
    let full = Solver::new(grid, metric);
    let inc = Solver::new(grid, background);
    let ext = Solver::exterior(grid, metric);
    let (mut su, mut si, mut sv) = (WaveState::zeros(grid.len()), WaveState::zeros(grid.len()), WaveState::zeros(grid.len()));
    for s in [&mut su, &mut si, &mut sv] {
        s.step = 1;
    }
    let (mut fu, mut fi) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
    let spw = grid.steps_per_window;
    let mut scattered = keep_trace.then(|| {
        let mut t = BoundaryTrace::new(TraceKind::Scattered, grid.lattice.n_ell, 2);
        t.seed = Some(w.seed);
        t
    });
    let mut out = MeasurementResult { full: Vec::new(), incoming: Vec::new(), exterior: Vec::new(), scattered: None };
    while out.full.len() < n_windows {
        let n = su.step as usize;
        let has = noise_source(grid, w, n, &full.a, &mut fu);
        noise_source(grid, w, n, &inc.a, &mut fi);
        full.step(&mut su, has.then_some(&fu[..]), None, Direction::Forward)?;
        inc.step(&mut si, has.then_some(&fi[..]), None, Direction::Forward)?;
        let lw: Vec<f64> = grid.trace(&su.cur).iter().zip(grid.trace(&si.cur)).map(|(a, b)| a - b).collect();
        ext.step(&mut sv, None, Some(&lw), Direction::Forward)?;
        if let Some(tr) = scattered.as_mut() {
            tr.push(&lw);
        }
        if su.step as usize % spw == 1 && su.step > 1 {
            out.full.push(SnapshotPair::capture(grid, &su, nodes));
            out.incoming.push(SnapshotPair::capture(grid, &si, nodes));
            out.exterior.push(SnapshotPair::capture(grid, &sv, nodes));
        }
    }
    out.scattered = scattered;
    Ok(out)
}

/// `χ_T(t)`: 1 up to `T − band`, 0 on `[T − band/2, T]`.
pub fn chi_end(t: f64, t_end: f64, band: f64) -> f64 {
    1.0 - smoothstep((t - (t_end - band)) / (0.5 * band))
}

/// Exterior problem with Dirichlet data `χ_T·h` on `(0, T)×∂M` from rest,
/// snapshotted at `T = t_end` (a lattice time).
pub fn exterior_solve(
    grid: &Grid,
    metric: &MetricField,
    data: &BoundaryTrace,
    end_step: usize,
    band: f64,
    nodes: &[usize],
) -> Result<SnapshotPair> {
    let ext = Solver::exterior(grid, metric);
    let mut st = WaveState::zeros(grid.len());
    st.step = 1;
    let t_end = grid.lattice.time(end_step);
    let zero = vec![0.0; grid.lattice.n_ell];
    while st.step as usize <= end_step {
        let n1 = st.step as usize + 1;
        let chi = chi_end(grid.lattice.time(n1), t_end, band);
        let row: Vec<f64> = data.row(n1).unwrap_or(&zero).iter().map(|v| v * chi).collect();
        ext.step(&mut st, None, Some(&row), Direction::Forward)?;
    }
    Ok(SnapshotPair::capture(grid, &st, nodes))
}

const MAGIC: &[u8; 8] = b"BSSNAP01";

/// Writes a full field: 32-byte header (magic, nx: u32, ny: u32, h, t),
/// then row-major little-endian `f64`.
pub fn write_field(path: &Path, grid: &Grid, field: &[f64], t: f64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(grid.n as u32).to_le_bytes())?;
    f.write_all(&(grid.n as u32).to_le_bytes())?;
    f.write_all(&grid.spec.h.to_le_bytes())?;
    f.write_all(&t.to_le_bytes())?;
    for v in field {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Field file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub t: f64,
    pub values: Vec<f64>,
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(Error::Io(format!("{}: not a snapshot file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (nx, ny) = (u32_at(8), u32_at(12));
    if bytes.len() != 32 + 8 * nx * ny {
        return Err(Error::Io(format!("{}: truncated", path.display())));
    }
    let values = (0..nx * ny).map(|k| f64_at(32 + 8 * k)).collect();
    Ok(FieldFile { nx, ny, h: f64_at(16), t: f64_at(24), values })
}

/// Backward solve from `(w^{top}, w^{top+1})` down to level `bottom`,
/// recording `w|_{∂M}` for every level in `bottom..=top`.
pub fn solve_backward(
    grid: &Grid,
    metric: &MetricField,
    top: usize,
    w_top: Vec<f64>,
    w_above: Vec<f64>,
    bottom: usize,
) -> Result<BoundaryTrace> {
    let solver = Solver::new(grid, metric);
    let mut st = WaveState { prev: w_above, cur: w_top, step: top as i64 };
    let mut rows = vec![grid.trace(&st.cur)];
    while st.step as usize > bottom {
        solver.step(&mut st, None, None, Direction::Backward)?;
        rows.push(grid.trace(&st.cur));
    }
    let mut tr = BoundaryTrace::new(TraceKind::Full, grid.lattice.n_ell, bottom);
    for r in rows.iter().rev() {
        tr.push(r);
    }
    Ok(tr)
}

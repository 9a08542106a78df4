//! Explicit upwind solve of the relaxed HJB equation on a uniform grid.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::relaxation::{
    build_steps, face_bounds, BoundaryRule, Gradient, HamiltonianSolver, MultiplierSet, NodeInput, StepData,
};
use crate::system::{DamAtState, Series, System};

pub const DEFAULT_COURANT_MARGIN: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub horizon: f64,
    pub dt: f64,
    /// Number of time steps `N`; levels run `0..=N`.
    pub n_steps: usize,
    /// Node count per state dimension.
    pub nodes: Vec<usize>,
    pub dx: Vec<f64>,
}

impl Grid {
    /// `dims` dimensions, each with spacing `dx` on `[0, 1]`.
    pub fn uniform(horizon: f64, dt: f64, dx: f64, dims: usize) -> Result<Self> {
        Self::new(horizon, dt, vec![dx; dims])
    }

    pub fn new(horizon: f64, dt: f64, dx: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > 0.0) {
            return Err(Error::Mismatch("grid: horizon and dt must be positive".into()));
        }
        let steps = horizon / dt;
        let n_steps = steps.round() as usize;
        if (steps - n_steps as f64).abs() > 1e-9 * steps.max(1.0) || n_steps == 0 {
            return Err(Error::Mismatch(format!("grid: dt = {dt} does not divide horizon {horizon}")));
        }
        let mut nodes = Vec::with_capacity(dx.len());
        for &h in &dx {
            let cells = 1.0 / h;
            let m = cells.round() as usize;
            if !(h > 0.0) || m == 0 || (cells - m as f64).abs() > 1e-9 * cells {
                return Err(Error::Mismatch(format!("grid: dx = {h} does not divide [0, 1]")));
            }
            nodes.push(m + 1);
        }
        Ok(Grid {
            horizon,
            dt,
            n_steps,
            nodes,
            dx,
        })
    }

    pub fn dims(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Row-major strides, last dimension fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims()];
        for k in (0..self.dims().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.nodes[k + 1];
        }
        s
    }

    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for k in (0..self.dims()).rev() {
            out[k] = node % self.nodes[k];
            node /= self.nodes[k];
        }
    }

    pub fn coordinate(&self, k: usize, idx: usize) -> f64 {
        if idx + 1 == self.nodes[k] {
            1.0
        } else {
            idx as f64 * self.dx[k]
        }
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Same horizon with `dt` and every `dx` halved.
    pub fn refined(&self) -> Result<Self> {
        Grid::new(self.horizon, self.dt / 2.0, self.dx.iter().map(|h| h / 2.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CflTerm {
    pub name: String,
    /// Bound on `|f_k|` over controls at their extremes, per hour.
    pub sup_drift: f64,
    /// `sup_drift / dx_k`
    pub per_cell: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CflReport {
    pub terms: Vec<CflTerm>,
    /// `Σ_k sup_drift_k / dx_k`
    pub sum: f64,
    pub courant: f64,
    pub margin: f64,
    pub dt: f64,
    pub dt_max: f64,
}

impl CflReport {
    pub fn ok(&self) -> bool {
        self.courant <= self.margin + 1e-12
    }
}

pub fn cfl_report(sys: &System, grid: &Grid, series: &Series, margin: f64) -> Result<CflReport> {
    let mut terms = Vec::new();
    for (i, dam) in sys.spec.dams.iter().enumerate() {
        let inflow_max = series.inflows.get(i).map_or(0.0, |s| s.max_value());
        let mut incoming = inflow_max;
        for &j in &sys.topology.upstream[i] {
            incoming += sys.spec.dams[j].phi_max_per_hour();
        }
        let sup = dam.phi_max_per_hour().max(incoming) / dam.volume_range();
        terms.push(CflTerm {
            name: dam.name.clone(),
            sup_drift: sup,
            per_cell: sup / grid.dx[i],
        });
    }
    if let Some(b) = &sys.spec.battery {
        let sup = b.rate() * b.c_bat().max(1.0);
        let k = sys.n_dams();
        terms.push(CflTerm {
            name: "battery".into(),
            sup_drift: sup,
            per_cell: sup / grid.dx[k],
        });
    }
    let sum: f64 = terms.iter().map(|t| t.per_cell).sum();
    let dt_max = if sum > 0.0 { margin / sum } else { f64::INFINITY };
    Ok(CflReport {
        terms,
        sum,
        courant: grid.dt * sum,
        margin,
        dt: grid.dt,
        dt_max,
    })
}

/// Value function on every time level plus the upwind derivative chosen at
/// each node.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueField {
    pub grid: Grid,
    /// `(n_steps + 1) x n_nodes`, level-major.
    pub values: Vec<f64>,
    /// `n_steps x n_nodes x dims`: entry for level `j` (1-based) at `j - 1`,
    /// the derivative of `U^j` used to produce `U^{j-1}`.
    pub du: Vec<f64>,
}

impl ValueField {
    pub fn level(&self, j: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[j * n..(j + 1) * n]
    }

    fn du_level(&self, j: usize) -> &[f64] {
        let n = self.grid.n_nodes() * self.grid.dims();
        &self.du[(j - 1) * n..j * n]
    }

    /// Field from raw level values; derivatives are centered in the interior
    /// and one-sided on the faces.
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let nn = grid.n_nodes();
        if values.len() != (grid.n_steps + 1) * nn {
            return Err(Error::Mismatch("value array does not match grid".into()));
        }
        let dims = grid.dims();
        let strides = grid.strides();
        let mut du = vec![0.0; grid.n_steps * nn * dims];
        let mut idx = vec![0; dims];
        let (mut dp, mut dm) = (vec![0.0; dims], vec![0.0; dims]);
        for j in 1..=grid.n_steps {
            let u = &values[j * nn..(j + 1) * nn];
            for node in 0..nn {
                grid.multi_index(node, &mut idx);
                one_sided(&grid, &strides, u, node, &idx, &mut dp, &mut dm);
                for k in 0..dims {
                    du[((j - 1) * nn + node) * dims + k] = 0.5 * (dp[k] + dm[k]);
                }
            }
        }
        Ok(ValueField { grid, values, du })
    }

    /// Multilinear interpolation of `U` at level `j`.
    pub fn value_at(&self, j: usize, x: &[f64]) -> Result<f64> {
        let u = self.level(j);
        interpolate(&self.grid, x, 1, |node, _| u[node]).map(|v| v[0])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"HJBF");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.grid.dims() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.grid.n_steps as u64).to_le_bytes());
        buf.extend_from_slice(&self.grid.horizon.to_le_bytes());
        buf.extend_from_slice(&self.grid.dt.to_le_bytes());
        for k in 0..self.grid.dims() {
            buf.extend_from_slice(&(self.grid.nodes[k] as u64).to_le_bytes());
            buf.extend_from_slice(&self.grid.dx[k].to_le_bytes());
        }
        for v in self.values.iter().chain(&self.du) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::io(path, "not a value-field dump");
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(4)? != b"HJBF" {
            return Err(bad());
        }
        let u32v = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let u64v = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let f64v = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        if u32v(take(4)?) != 1 {
            return Err(bad());
        }
        let dims = u32v(take(4)?) as usize;
        let n_steps = u64v(take(8)?) as usize;
        let horizon = f64v(take(8)?);
        let dt = f64v(take(8)?);
        let mut nodes = Vec::new();
        let mut dx = Vec::new();
        for _ in 0..dims {
            nodes.push(u64v(take(8)?) as usize);
            dx.push(f64v(take(8)?));
        }
        let grid = Grid {
            horizon,
            dt,
            n_steps,
            nodes,
            dx,
        };
        let nn = grid.n_nodes();
        let nv = (n_steps + 1) * nn;
        let nd = n_steps * nn * dims;
        let mut values = Vec::with_capacity(nv);
        for _ in 0..nv {
            values.push(f64v(take(8)?));
        }
        let mut du = Vec::with_capacity(nd);
        for _ in 0..nd {
            du.push(f64v(take(8)?));
        }
        Ok(ValueField { grid, values, du })
    }
}

fn one_sided(grid: &Grid, strides: &[usize], u: &[f64], node: usize, idx: &[usize], dp: &mut [f64], dm: &mut [f64]) {
    for k in 0..grid.dims() {
        let h = grid.dx[k];
        let s = strides[k];
        let top = grid.nodes[k] - 1;
        let fwd = (idx[k] < top).then(|| (u[node + s] - u[node]) / h);
        let bwd = (idx[k] > 0).then(|| (u[node] - u[node - s]) / h);
        let (p, m) = match (fwd, bwd) {
            (Some(p), Some(m)) => (p, m),
            (Some(p), None) => (p, p),
            (None, Some(m)) => (m, m),
            (None, None) => (0.0, 0.0),
        };
        dp[k] = p;
        dm[k] = m;
    }
}

/// Multilinear interpolation of `width` values per node.
fn interpolate(grid: &Grid, x: &[f64], width: usize, get: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>> {
    let dims = grid.dims();
    if x.len() != dims {
        return Err(Error::Mismatch(format!("point has {} components, grid has {dims}", x.len())));
    }
    let strides = grid.strides();
    let mut base = 0usize;
    let mut frac = vec![0.0; dims];
    let mut has_upper = vec![false; dims];
    for k in 0..dims {
        let v = x[k];
        if !(-1e-12..=1.0 + 1e-12).contains(&v) {
            return Err(Error::Domain {
                what: "state component",
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let cells = grid.nodes[k] - 1;
        let pos = (v.clamp(0.0, 1.0) / grid.dx[k]).min(cells as f64);
        let mut i = pos.floor() as usize;
        if i >= cells && cells > 0 {
            i = cells - 1;
        }
        let f = if cells == 0 { 0.0 } else { pos - i as f64 };
        frac[k] = f;
        has_upper[k] = cells > 0;
        base += i * strides[k];
    }
    let mut out = vec![0.0; width];
    for corner in 0..(1usize << dims) {
        let mut w = 1.0;
        let mut node = base;
        for k in 0..dims {
            if corner >> k & 1 == 1 {
                if !has_upper[k] {
                    w = 0.0;
                    break;
                }
                w *= frac[k];
                node += strides[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * get(node, c);
        }
    }
    Ok(out)
}

/// Upwind derivative used for the forward simulation at `(t, x)`: the stored
/// choice of level `⌊t/Δt⌋ + 1`, multilinearly interpolated.
pub fn gradient_at(field: &ValueField, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let g = &field.grid;
    if !(t >= -1e-9 && t <= g.horizon + 1e-9) {
        return Err(Error::Domain {
            what: "time",
            value: t,
            lo: 0.0,
            hi: g.horizon,
        });
    }
    let level = (((t / g.dt) + 1e-9).floor() as usize + 1).min(g.n_steps);
    let du = field.du_level(level);
    let dims = g.dims();
    interpolate(g, x, dims, |node, k| du[node * dims + k])
}

/// Per-dimension, per-node dam data on the grid.
struct GridDamTable {
    /// `table[i][idx]` for dam `i` at coordinate index `idx`
    table: Vec<Vec<DamAtState>>,
}

impl GridDamTable {
    fn new(sys: &System, grid: &Grid) -> Result<Self> {
        let mut table = Vec::new();
        for (i, dam) in sys.spec.dams.iter().enumerate() {
            let mut col = Vec::new();
            for idx in 0..grid.nodes[i] {
                col.push(DamAtState::new(dam, grid.coordinate(i, idx))?);
            }
            table.push(col);
        }
        Ok(GridDamTable { table })
    }
}

/// Capacity precheck: the earliest step where demand exceeds every source at
/// its best state.
pub fn check_capacity(sys: &System, steps: &[StepData]) -> Result<()> {
    let mut hydro = 0.0;
    for dam in &sys.spec.dams {
        let mut best: f64 = 0.0;
        for k in 0..=100 {
            best = best.max(crate::system::available_power_coefficient(dam, k as f64 / 100.0)?);
        }
        hydro += best;
    }
    let ffs: f64 = sys.spec.ffs.iter().map(|f| f.p_max).sum();
    let bat = sys.spec.battery.as_ref().map_or(0.0, |b| b.p_max_discharge);
    let cap = hydro + ffs + bat;
    for s in steps {
        if s.demand > cap * (1.0 + 1e-12) {
            return Err(Error::Infeasible {
                t_hours: s.t,
                shortfall_kw: s.demand - cap,
                context: "demand exceeds installed capacity".into(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct HjbOptions {
    pub margin: f64,
}

impl Default for HjbOptions {
    fn default() -> Self {
        HjbOptions {
            margin: DEFAULT_COURANT_MARGIN,
        }
    }
}

pub struct HjbSolver<'a> {
    sys: &'a System,
    grid: &'a Grid,
    steps: Vec<StepData>,
    dams: GridDamTable,
    proto: HamiltonianSolver,
}

impl<'a> HjbSolver<'a> {
    pub fn new(sys: &'a System, grid: &'a Grid, lambda: &MultiplierSet, series: &Series, opts: &HjbOptions) -> Result<Self> {
        if grid.dims() != sys.n_states() {
            return Err(Error::Mismatch(format!(
                "grid has {} dimensions, system has {} states",
                grid.dims(),
                sys.n_states()
            )));
        }
        series.check_horizon(grid.horizon)?;
        let cfl = cfl_report(sys, grid, series, opts.margin)?;
        if !cfl.ok() {
            return Err(Error::Cfl {
                courant: cfl.courant,
                limit: opts.margin,
            });
        }
        let steps = build_steps(sys, series, lambda, grid.dt, grid.n_steps)?;
        check_capacity(sys, &steps)?;
        Ok(HjbSolver {
            sys,
            grid,
            steps,
            dams: GridDamTable::new(sys, grid)?,
            proto: HamiltonianSolver::new(sys)?,
        })
    }

    pub fn steps(&self) -> &[StepData] {
        &self.steps
    }

    /// `U^{j-1}` from `U^j`; the derivative chosen per node goes to `du_out`.
    pub fn backward_step(&self, j: usize, u_next: &[f64], u_prev: &mut [f64], du_out: &mut [f64]) -> Result<()> {
        let grid = self.grid;
        let dims = grid.dims();
        let nd = self.sys.n_dams();
        let step = &self.steps[j - 1];
        let strides = grid.strides();
        const CHUNK: usize = 64;
        let results: Vec<Result<()>> = u_prev
            .par_chunks_mut(CHUNK)
            .zip(du_out.par_chunks_mut(CHUNK * dims))
            .enumerate()
            .map_init(
                || {
                    (
                        self.proto.clone(),
                        vec![0usize; dims],
                        vec![0.0; dims],
                        vec![0.0; dims],
                        vec![(0.0, 0.0); dims],
                        Vec::with_capacity(nd),
                    )
                },
                |(solver, idx, dp, dm, bounds, dams), (c, (out, du))| {
                    for (off, o) in out.iter_mut().enumerate() {
                        let node = c * CHUNK + off;
                        grid.multi_index(node, idx);
                        one_sided(grid, &strides, u_next, node, idx, dp, dm);
                        dams.clear();
                        for i in 0..nd {
                            dams.push(self.dams.table[i][idx[i]]);
                        }
                        for k in 0..dims {
                            bounds[k] = face_bounds(grid.coordinate(k, idx[k]), BoundaryRule::Node).0;
                        }
                        let h = solver.solve(&NodeInput {
                            step,
                            dams,
                            drift_bounds: bounds,
                            gradient: Gradient::Upwind { plus: dp, minus: dm },
                            arrivals: None,
                        })?;
                        let v = u_next[node] + grid.dt * h;
                        if !v.is_finite() {
                            return Err(Error::Numerical { level: j, node });
                        }
                        *o = v;
                        let drift = &solver.sol.drift;
                        for k in 0..dims {
                            let tol = 1e-12;
                            du[off * dims + k] = if drift[k] > tol {
                                dp[k]
                            } else if drift[k] < -tol {
                                dm[k]
                            } else {
                                0.5 * (dp[k] + dm[k])
                            };
                        }
                    }
                    Ok(())
                },
            )
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        Ok(())
    }

    pub fn solve(&self) -> Result<ValueField> {
        let grid = self.grid;
        let nn = grid.n_nodes();
        let dims = grid.dims();
        let n = grid.n_steps;
        let mut values = vec![0.0; (n + 1) * nn];
        let mut du = vec![0.0; n * nn * dims];
        for j in (1..=n).rev() {
            let (lower, upper) = values.split_at_mut(j * nn);
            let u_next = &upper[..nn];
            let u_prev = &mut lower[(j - 1) * nn..];
            let du_out = &mut du[(j - 1) * nn * dims..j * nn * dims];
            self.backward_step(j, u_next, u_prev, du_out)?;
        }
        Ok(ValueField {
            grid: grid.clone(),
            values,
            du,
        })
    }
}

pub fn solve_hjb(sys: &System, grid: &Grid, lambda: &MultiplierSet, series: &Series) -> Result<ValueField> {
    HjbSolver::new(sys, grid, lambda, series, &HjbOptions::default())?.solve()
}

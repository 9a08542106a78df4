//! Forward Euler simulation of the relaxed, admissible and smoothed paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::{gradient_at, Grid, ValueField};
use crate::relaxation::{
    build_steps, face_bounds, virtual_normalizer, BoundaryRule, ExtendedControl, Gradient, HamiltonianSolver,
    MultiplierSet, NodeInput, StepData,
};
use crate::smooth::{QpBlock, QpVar, StepQp};
use crate::system::{DamAtState, Series, System, SECONDS_PER_HOUR};

/// Distance from a face (normalized) at which the forward path treats the
/// state constraint as active. The step-inside guard does the rest; a wider
/// band makes the path refuse to store where the value field still does.
pub const FACE_TRIGGER: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Relaxed,
    Admissible,
    Smoothed,
}

/// Smoothing weights per control group. Penalties apply to turbine and
/// spill flows in m³/s and battery power in kW, differenced over the step
/// length `δt` in seconds: group variation is `Σ δt·(Δu/δt)²`, so weights
/// are in USD·s³/m⁶ and USD·s³/kJ².
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Beta {
    pub turbine: f64,
    pub spill: f64,
    pub battery: f64,
}

impl Beta {
    pub const ZERO: Beta = Beta {
        turbine: 0.0,
        spill: 0.0,
        battery: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.turbine == 0.0 && self.spill == 0.0 && self.battery == 0.0
    }

    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Turbine => self.turbine,
            Group::Spill => self.spill,
            Group::Battery => self.battery,
        }
    }

    pub fn with(mut self, g: Group, v: f64) -> Self {
        match g {
            Group::Turbine => self.turbine = v,
            Group::Spill => self.spill = v,
            Group::Battery => self.battery = v,
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Turbine,
    Spill,
    Battery,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Turbine, Group::Spill, Group::Battery];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Turbine => "turbine",
            Group::Spill => "spill",
            Group::Battery => "battery",
        }
    }
}

/// Squared variation per group, `Σ δt·(Δu/δt)²` over consecutive steps,
/// with `δt` in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub turbine: f64,
    pub spill: f64,
    pub battery: f64,
}

impl Variation {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Turbine => self.turbine,
            Group::Spill => self.spill,
            Group::Battery => self.battery,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    /// State at the start of the step.
    pub state: Vec<f64>,
    pub control: ExtendedControl,
    /// Realized outflow per dam, m³/h.
    pub outflow: Vec<f64>,
    /// Natural inflow per dam, m³/h.
    pub inflow: Vec<f64>,
    /// Upstream water reaching each dam, m³/h: delayed outflows on
    /// admissible paths, virtual inflow on the relaxed path.
    pub arrivals: Vec<f64>,
    /// kW
    pub hydro_power: Vec<f64>,
    /// kW
    pub ffs_power: Vec<f64>,
    /// kW, positive when discharging
    pub battery_power: f64,
    /// kW
    pub demand: f64,
    /// USD/h
    pub primal_rate: f64,
    /// USD/h
    pub lagrangian_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub kind: PathKind,
    pub dt: f64,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    /// USD
    pub primal_cost: f64,
    /// USD
    pub lagrangian: f64,
    pub variation: Variation,
    pub beta: Beta,
    /// Largest correction applied when keeping states inside `[0, 1]`.
    pub max_clamp: f64,
}

impl Trajectory {
    pub fn state_at(&self, n: usize) -> &[f64] {
        if n < self.steps.len() {
            &self.steps[n].state
        } else {
            &self.final_state
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualEval {
    /// USD
    pub theta: f64,
    /// Per link, per segment: `ψ̄∫ψ̂ − ∫h(·−τ)` over the segment, m³.
    pub subgradient: Vec<Vec<f64>>,
    pub trajectory: Trajectory,
}

impl DualEval {
    pub fn flat_subgradient(&self) -> Vec<f64> {
        self.subgradient.iter().flatten().copied().collect()
    }
}

/// Rectangle-rule integral of the primal running cost.
pub fn primal_cost(traj: &Trajectory) -> f64 {
    traj.steps.iter().map(|s| s.primal_rate * traj.dt).sum()
}

#[derive(Clone, Copy)]
enum Mode {
    Relaxed,
    Admissible,
    Smoothed(Beta),
}

/// Immutable inputs shared by the forward simulations of one multiplier.
pub struct ForwardContext<'a> {
    pub sys: &'a System,
    pub field: &'a ValueField,
    pub lambda: &'a MultiplierSet,
    pub steps: Vec<StepData>,
    pub x0: Vec<f64>,
    delays: Vec<usize>,
    psi: Vec<f64>,
}

impl<'a> ForwardContext<'a> {
    pub fn new(sys: &'a System, field: &'a ValueField, lambda: &'a MultiplierSet, series: &Series, x0: &[f64]) -> Result<Self> {
        let grid = &field.grid;
        if grid.dims() != sys.n_states() {
            return Err(Error::Mismatch("value field does not match the system".into()));
        }
        if x0.len() != sys.n_states() {
            return Err(Error::Mismatch(format!(
                "initial state has {} components, system has {}",
                x0.len(),
                sys.n_states()
            )));
        }
        for &v in x0 {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain {
                    what: "initial state component",
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        if lambda.n_links() != sys.topology.links.len() {
            return Err(Error::Mismatch("multiplier set does not match the cascade links".into()));
        }
        if (lambda.horizon - grid.horizon).abs() > 1e-9 {
            return Err(Error::Mismatch("multiplier horizon differs from the grid horizon".into()));
        }
        series.check_horizon(grid.horizon)?;
        let mut delays = Vec::new();
        for l in 0..sys.topology.links.len() {
            let steps = sys.tau(l) / grid.dt;
            let d = steps.round();
            if (steps - d).abs() > 1e-9 {
                return Err(Error::Mismatch(format!(
                    "delay {} h of link {l} is not a multiple of dt = {}",
                    sys.tau(l),
                    grid.dt
                )));
            }
            delays.push(d as usize);
        }
        let psi = (0..sys.topology.links.len())
            .map(|l| virtual_normalizer(sys, l))
            .collect::<Result<_>>()?;
        Ok(ForwardContext {
            sys,
            field,
            lambda,
            steps: build_steps(sys, series, lambda, grid.dt, grid.n_steps)?,
            x0: x0.to_vec(),
            delays,
            psi,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.field.grid
    }

    fn run(&self, mode: Mode) -> Result<Trajectory> {
        let sys = self.sys;
        let grid = self.grid();
        let nd = sys.n_dams();
        let ns = sys.n_states();
        let dt = grid.dt;
        let mut solver = HamiltonianSolver::new(sys)?;
        let mut x = self.x0.clone();
        let mut records: Vec<StepRecord> = Vec::with_capacity(grid.n_steps);
        let mut bounds = vec![(0.0, 0.0); ns];
        let mut max_clamp: f64 = 0.0;
        let admissible = !matches!(mode, Mode::Relaxed);

        for (n, step) in self.steps.iter().enumerate() {
            let g = gradient_at(self.field, step.t, &x)?;
            let mut dams = Vec::with_capacity(nd);
            for (i, dam) in sys.spec.dams.iter().enumerate() {
                dams.push(DamAtState::new(dam, x[i])?);
            }
            for k in 0..ns {
                let rule = BoundaryRule::Forward {
                    trigger: FACE_TRIGGER,
                    dt,
                };
                bounds[k] = face_bounds(x[k], rule).0;
            }
            let mut arrivals = vec![0.0; nd];
            if admissible {
                for (l, &j) in sys.topology.links.iter().enumerate() {
                    let down = sys.topology.downstream[j].unwrap();
                    if n >= self.delays[l] {
                        arrivals[down] += records[n - self.delays[l]].outflow[j];
                    }
                }
            }
            let inp = NodeInput {
                step,
                dams: &dams,
                drift_bounds: &bounds,
                gradient: Gradient::Linear(&g),
                arrivals: admissible.then_some(&arrivals[..]),
            };
            let control = match mode {
                Mode::Smoothed(beta) if !beta.is_zero() && n > 0 => {
                    self.smoothed_control(step, &dams, &bounds, &g, &arrivals, beta, records.last().unwrap())?
                }
                _ => {
                    solver.solve(&inp)?;
                    let mut c = solver.sol.to_control();
                    if admissible {
                        c.virtuals.clear();
                    }
                    c
                }
            };

            let mut outflow = Vec::with_capacity(nd);
            let mut hydro_power = Vec::with_capacity(nd);
            let mut primal = 0.0;
            let mut lagr = 0.0;
            for i in 0..nd {
                let h = dams[i].outflow(control.turbine[i], control.spill[i]);
                outflow.push(h);
                hydro_power.push(dams[i].power * control.turbine[i]);
                primal += sys.spec.dams[i].k_h * h;
                if let Some(l) = sys.topology.link_of(i) {
                    lagr -= step.lambda_release[l] * h;
                }
            }
            if !admissible {
                for (l, &j) in sys.topology.links.iter().enumerate() {
                    let down = sys.topology.downstream[j].unwrap();
                    let v = self.psi[l] * control.virtuals[l];
                    arrivals[down] += v;
                    lagr += step.lambda_virtual[l] * v;
                }
            } else {
                // λ_j(t)·h_j(t−τ_j): constant in the controls but part of the Lagrangian
                for (l, &j) in sys.topology.links.iter().enumerate() {
                    if n >= self.delays[l] {
                        lagr += step.lambda_virtual[l] * records[n - self.delays[l]].outflow[j];
                    }
                }
            }
            let ffs_power: Vec<f64> = sys.spec.ffs.iter().zip(&control.ffs).map(|(f, u)| f.p_max * u).collect();
            for (f, u) in sys.spec.ffs.iter().zip(&control.ffs) {
                primal += f.full_cost_rate() * u;
            }
            let battery_power = sys.spec.battery.as_ref().map_or(0.0, |b| b.p_max_discharge * control.battery);

            let mut next = x.clone();
            for i in 0..nd {
                let r = sys.spec.dams[i].volume_range();
                next[i] = x[i] + dt * (step.inflow[i] + arrivals[i] - outflow[i]) / r;
            }
            if let Some(b) = &sys.spec.battery {
                next[nd] = x[nd] - dt * b.rate() * control.battery;
            }
            for v in &mut next {
                let c = v.clamp(0.0, 1.0);
                max_clamp = max_clamp.max((c - *v).abs());
                *v = c;
            }

            records.push(StepRecord {
                t: step.t,
                state: x.clone(),
                control,
                outflow,
                inflow: step.inflow.clone(),
                arrivals,
                hydro_power,
                ffs_power,
                battery_power,
                demand: step.demand,
                primal_rate: primal,
                lagrangian_rate: primal + lagr,
            });
            x = next;
        }

        let beta = match mode {
            Mode::Smoothed(b) => b,
            _ => Beta::ZERO,
        };
        let mut traj = Trajectory {
            kind: match mode {
                Mode::Relaxed => PathKind::Relaxed,
                Mode::Admissible => PathKind::Admissible,
                Mode::Smoothed(_) => PathKind::Smoothed,
            },
            dt,
            final_state: x,
            primal_cost: 0.0,
            lagrangian: records.iter().map(|r| r.lagrangian_rate * dt).sum(),
            variation: Variation::default(),
            beta,
            max_clamp,
            steps: records,
        };
        traj.primal_cost = primal_cost(&traj);
        traj.variation = variation(sys, &traj)?;
        Ok(traj)
    }

    #[allow(clippy::too_many_arguments)]
    fn smoothed_control(
        &self,
        step: &StepData,
        dams: &[DamAtState],
        bounds: &[(f64, f64)],
        g: &[f64],
        arrivals: &[f64],
        beta: Beta,
        prev: &StepRecord,
    ) -> Result<ExtendedControl> {
        let sys = self.sys;
        let nd = sys.n_dams();
        let dt = step.dt;
        // per-hour rate of the step penalty β·Δu²/δt
        let per = 1.0 / (dt * dt * SECONDS_PER_HOUR);
        let mut qp = StepQp {
            demand: step.demand,
            ..Default::default()
        };
        let prev_dams: Vec<DamAtState> = sys
            .spec
            .dams
            .iter()
            .enumerate()
            .map(|(i, d)| DamAtState::new(d, prev.state[i]))
            .collect::<Result<_>>()?;
        for i in 0..nd {
            let dam = &sys.spec.dams[i];
            let at = dams[i];
            let r = dam.volume_range();
            let mut unit = dam.k_h - g[i] / r;
            if let Some(l) = sys.topology.link_of(i) {
                unit -= step.lambda_release[l];
            }
            let inflow = step.inflow[i] + arrivals[i];
            let (lo, hi) = bounds[i];
            let cap = at.turbine_cap + at.spill_cap;
            let h_lo = (inflow - hi * r).max(0.0);
            let h_hi = (inflow - lo * r).min(cap);
            if h_lo > h_hi + 1e-9 * cap {
                return Err(Error::Infeasible {
                    t_hours: step.t,
                    shortfall_kw: 0.0,
                    context: format!("dam {} cannot satisfy its boundary constraint", dam.name),
                });
            }
            let scale_t = at.turbine_cap / SECONDS_PER_HOUR;
            let scale_s = at.spill_cap / SECONDS_PER_HOUR;
            let prev_t = prev_dams[i].turbine_cap / SECONDS_PER_HOUR * prev.control.turbine[i];
            let prev_s = prev_dams[i].spill_cap / SECONDS_PER_HOUR * prev.control.spill[i];
            let t = qp.vars.len();
            qp.vars.push(QpVar {
                lo: 0.0,
                hi: 1.0,
                c: unit * at.turbine_cap,
                q: beta.turbine * scale_t * scale_t * per,
                r: if scale_t > 0.0 { prev_t / scale_t } else { 0.0 },
                p: at.power,
            });
            qp.vars.push(QpVar {
                lo: 0.0,
                hi: 1.0,
                c: unit * at.spill_cap,
                q: beta.spill * scale_s * scale_s * per,
                r: if scale_s > 0.0 { prev_s / scale_s } else { 0.0 },
                p: 0.0,
            });
            qp.blocks.push(QpBlock {
                t,
                s: t + 1,
                a_t: at.turbine_cap,
                a_s: at.spill_cap,
                lo: h_lo.min(h_hi),
                hi: h_hi,
            });
        }
        for f in &sys.spec.ffs {
            qp.vars.push(QpVar {
                lo: 0.0,
                hi: 1.0,
                c: f.full_cost_rate(),
                q: 0.0,
                r: 0.0,
                p: f.p_max,
            });
        }
        if let Some(b) = &sys.spec.battery {
            let (lo, hi) = bounds[nd];
            let rate = b.rate();
            let y_lo = (-b.c_bat()).max(-hi / rate);
            let y_hi = 1.0f64.min(-lo / rate);
            qp.vars.push(QpVar {
                lo: y_lo,
                hi: y_hi.max(y_lo),
                c: -g[nd] * rate,
                q: beta.battery * b.p_max_discharge * b.p_max_discharge * per,
                r: prev.control.battery,
                p: b.p_max_discharge,
            });
        }
        let sol = qp.solve(step.t)?;
        let nf = sys.spec.ffs.len();
        Ok(ExtendedControl {
            turbine: (0..nd).map(|i| sol[2 * i].clamp(0.0, 1.0)).collect(),
            spill: (0..nd).map(|i| sol[2 * i + 1].clamp(0.0, 1.0)).collect(),
            ffs: (0..nf).map(|k| sol[2 * nd + k].clamp(0.0, 1.0)).collect(),
            battery: if sys.spec.battery.is_some() { sol[2 * nd + nf] } else { 0.0 },
            virtuals: Vec::new(),
        })
    }

    pub fn relaxed(&self) -> Result<DualEval> {
        let traj = self.run(Mode::Relaxed)?;
        let sys = self.sys;
        let dt = traj.dt;
        let mut sub: Vec<Vec<f64>> = (0..self.lambda.n_links()).map(|l| vec![0.0; self.lambda.segments(l)]).collect();
        for (l, &j) in sys.topology.links.iter().enumerate() {
            let tau = sys.tau(l);
            for rec in &traj.steps {
                let (a, b) = (rec.t, rec.t + dt);
                let v = self.psi[l] * rec.control.virtuals[l];
                if v != 0.0 {
                    self.lambda.for_overlaps(l, a.max(tau), b, |k, w| sub[l][k] += w * v);
                }
                let h = rec.outflow[j];
                if h != 0.0 {
                    self.lambda.for_overlaps(l, a + tau, b + tau, |k, w| sub[l][k] -= w * h);
                }
            }
        }
        Ok(DualEval {
            theta: traj.lagrangian,
            subgradient: sub,
            trajectory: traj,
        })
    }

    pub fn admissible(&self) -> Result<Trajectory> {
        self.run(Mode::Admissible)
    }

    pub fn smoothed(&self, beta: Beta) -> Result<Trajectory> {
        if beta.turbine < 0.0 || beta.spill < 0.0 || beta.battery < 0.0 {
            return Err(Error::Mismatch("smoothing weights must be nonnegative".into()));
        }
        if beta.is_zero() {
            let mut t = self.run(Mode::Admissible)?;
            t.kind = PathKind::Smoothed;
            return Ok(t);
        }
        self.run(Mode::Smoothed(beta))
    }
}

fn variation(sys: &System, traj: &Trajectory) -> Result<Variation> {
    let dt = traj.dt * SECONDS_PER_HOUR;
    let mut v = Variation::default();
    let phys = |rec: &StepRecord| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Vec::new();
        let mut s = Vec::new();
        for (i, dam) in sys.spec.dams.iter().enumerate() {
            let at = DamAtState::new(dam, rec.state[i])?;
            t.push(at.turbine_cap / SECONDS_PER_HOUR * rec.control.turbine[i]);
            s.push(at.spill_cap / SECONDS_PER_HOUR * rec.control.spill[i]);
        }
        Ok((t, s))
    };
    let mut prev: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for rec in &traj.steps {
        let (t, s) = phys(rec)?;
        let b = rec.battery_power;
        if let Some((pt, ps, pb)) = &prev {
            v.turbine += t.iter().zip(pt).map(|(a, b)| ((a - b) / dt).powi(2) * dt).sum::<f64>();
            v.spill += s.iter().zip(ps).map(|(a, b)| ((a - b) / dt).powi(2) * dt).sum::<f64>();
            v.battery += ((b - pb) / dt).powi(2) * dt;
        }
        prev = Some((t, s, b));
    }
    Ok(v)
}

pub fn simulate_relaxed(
    sys: &System,
    lambda: &MultiplierSet,
    field: &ValueField,
    series: &Series,
    x0: &[f64],
) -> Result<DualEval> {
    ForwardContext::new(sys, field, lambda, series, x0)?.relaxed()
}

pub fn simulate_admissible(
    sys: &System,
    lambda: &MultiplierSet,
    field: &ValueField,
    series: &Series,
    x0: &[f64],
) -> Result<Trajectory> {
    ForwardContext::new(sys, field, lambda, series, x0)?.admissible()
}

pub fn simulate_smoothed(
    sys: &System,
    lambda: &MultiplierSet,
    field: &ValueField,
    series: &Series,
    x0: &[f64],
    beta: Beta,
) -> Result<Trajectory> {
    ForwardContext::new(sys, field, lambda, series, x0)?.smoothed(beta)
}

/// Trajectory CSV: one row per step, a leading comment line with units.
pub fn write_trajectory_csv(sys: &System, traj: &Trajectory, path: &Path) -> Result<()> {
    let header = trajectory_header(sys, traj.kind);
    let mut out = String::new();
    out.push_str(&format!(
        "# {} path; t in h, states normalized, controls normalized, flows in m3/s, power in kW, cost rate in USD/h; the last row holds the terminal state\n",
        match traj.kind {
            PathKind::Relaxed => "relaxed",
            PathKind::Admissible => "admissible",
            PathKind::Smoothed => "smoothed",
        }
    ));
    out.push_str(&header.join(","));
    out.push('\n');
    for rec in &traj.steps {
        let mut row: Vec<f64> = vec![rec.t];
        row.extend(&rec.state);
        row.extend(&rec.control.turbine);
        row.extend(&rec.control.spill);
        row.extend(&rec.control.ffs);
        if sys.spec.battery.is_some() {
            row.push(rec.control.battery);
        }
        if traj.kind == PathKind::Relaxed {
            row.extend(&rec.control.virtuals);
        }
        row.extend(rec.outflow.iter().map(|h| h / SECONDS_PER_HOUR));
        row.extend(rec.inflow.iter().map(|h| h / SECONDS_PER_HOUR));
        row.extend(rec.arrivals.iter().map(|h| h / SECONDS_PER_HOUR));
        row.extend(&rec.hydro_power);
        row.extend(&rec.ffs_power);
        if sys.spec.battery.is_some() {
            row.push(rec.battery_power);
        }
        row.push(rec.demand);
        row.push(rec.primal_rate);
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut last: Vec<String> = vec![format!("{:e}", traj.dt * traj.steps.len() as f64)];
    last.extend(traj.final_state.iter().map(|v| format!("{v:e}")));
    last.resize(header.len(), String::new());
    out.push_str(&last.join(","));
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn trajectory_header(sys: &System, kind: PathKind) -> Vec<String> {
    let mut h = vec!["t_hours".to_string()];
    for d in &sys.spec.dams {
        h.push(format!("v_{}", d.index));
    }
    if sys.spec.battery.is_some() {
        h.push("a".into());
    }
    for d in &sys.spec.dams {
        h.push(format!("phi_tur_{}", d.index));
    }
    for d in &sys.spec.dams {
        h.push(format!("phi_s_{}", d.index));
    }
    for f in &sys.spec.ffs {
        h.push(format!("phi_f_{}", f.index));
    }
    if sys.spec.battery.is_some() {
        h.push("phi_a".into());
    }
    if kind == PathKind::Relaxed {
        for &j in &sys.topology.links {
            h.push(format!("psi_{}", sys.spec.dams[j].index));
        }
    }
    for d in &sys.spec.dams {
        h.push(format!("outflow_{}", d.index));
    }
    for d in &sys.spec.dams {
        h.push(format!("inflow_{}", d.index));
    }
    for d in &sys.spec.dams {
        h.push(format!("arrival_{}", d.index));
    }
    for d in &sys.spec.dams {
        h.push(format!("p_hydro_{}", d.index));
    }
    for f in &sys.spec.ffs {
        h.push(format!("p_ffs_{}", f.index));
    }
    if sys.spec.battery.is_some() {
        h.push("p_battery".into());
    }
    h.push("demand".into());
    h.push("cost_rate".into());
    h
}

//! Lagrange multipliers for the relaxed delay constraints, the extended
//! control set, and the pointwise minimization of the relaxed Hamiltonian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{Lp, LpStatus};
use crate::system::{
    max_spill_flow, max_turbine_flow, DamAtState, Series, System, SECONDS_PER_HOUR,
};

/// Piecewise-constant multiplier of one river link on `[τ, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMultiplier {
    pub tau: f64,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub horizon: f64,
    pub level: u32,
    pub links: Vec<LinkMultiplier>,
}

impl MultiplierSet {
    /// Level-`level` set with `2^(level-1)` segments per link, each initialized
    /// to the link's entry of `init`.
    pub fn constant(horizon: f64, taus: &[f64], level: u32, init: &[f64]) -> Self {
        let m = 1usize << (level.max(1) - 1);
        let links = taus
            .iter()
            .zip(init)
            .map(|(&tau, &v)| LinkMultiplier {
                tau,
                coeffs: vec![v; m],
            })
            .collect();
        MultiplierSet {
            horizon,
            level: level.max(1),
            links,
        }
    }

    pub fn for_system(sys: &System, horizon: f64, level: u32, init: &[f64]) -> Self {
        let taus: Vec<f64> = (0..sys.topology.links.len()).map(|l| sys.tau(l)).collect();
        Self::constant(horizon, &taus, level, init)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.links {
            l.coeffs.iter_mut().for_each(|c| *c = 0.0);
        }
        z
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn segments(&self, link: usize) -> usize {
        self.links[link].coeffs.len()
    }

    pub fn segment_width(&self, link: usize) -> f64 {
        let l = &self.links[link];
        (self.horizon - l.tau) / l.coeffs.len() as f64
    }

    pub fn segment_start(&self, link: usize, k: usize) -> f64 {
        self.links[link].tau + k as f64 * self.segment_width(link)
    }

    /// `λ_j(t)`; zero outside `[τ_j, T)`.
    pub fn eval(&self, link: usize, t: f64) -> f64 {
        let l = &self.links[link];
        if t < l.tau || t >= self.horizon {
            return 0.0;
        }
        let w = self.segment_width(link);
        let k = (((t - l.tau) / w).floor() as usize).min(l.coeffs.len() - 1);
        l.coeffs[k]
    }

    /// Calls `f(k, overlap)` for every segment of `link` intersecting `[a, b)`.
    pub fn for_overlaps(&self, link: usize, a: f64, b: f64, mut f: impl FnMut(usize, f64)) {
        let m = self.segments(link);
        for k in 0..m {
            let s0 = self.segment_start(link, k);
            let s1 = if k + 1 == m { self.horizon } else { self.segment_start(link, k + 1) };
            let w = b.min(s1) - a.max(s0);
            if w > 0.0 {
                f(k, w);
            }
        }
    }

    /// Mean of `λ_j` over `[a, b)`.
    pub fn mean_over(&self, link: usize, a: f64, b: f64) -> f64 {
        if b <= a {
            return self.eval(link, a);
        }
        let mut s = 0.0;
        let c = &self.links[link].coeffs;
        self.for_overlaps(link, a, b, |k, w| s += c[k] * w);
        s / (b - a)
    }

    /// Next level: every segment split in two, values duplicated.
    pub fn refine(&self) -> Self {
        let links = self
            .links
            .iter()
            .map(|l| LinkMultiplier {
                tau: l.tau,
                coeffs: l.coeffs.iter().flat_map(|&c| [c, c]).collect(),
            })
            .collect();
        MultiplierSet {
            horizon: self.horizon,
            level: self.level + 1,
            links,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.links.iter().flat_map(|l| l.coeffs.iter().copied()).collect()
    }

    pub fn with_flat(&self, x: &[f64]) -> Self {
        let mut out = self.clone();
        let mut it = x.iter();
        for l in &mut out.links {
            for c in &mut l.coeffs {
                *c = *it.next().expect("flat vector too short");
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.links.iter().map(|l| l.coeffs.len()).sum()
    }
}

/// Normalized controls. `virtuals` is empty on admissible paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtendedControl {
    pub turbine: Vec<f64>,
    pub spill: Vec<f64>,
    pub ffs: Vec<f64>,
    pub battery: f64,
    pub virtuals: Vec<f64>,
}

impl ExtendedControl {
    pub fn zeros(sys: &System) -> Self {
        ExtendedControl {
            turbine: vec![0.0; sys.n_dams()],
            spill: vec![0.0; sys.n_dams()],
            ffs: vec![0.0; sys.spec.ffs.len()],
            battery: 0.0,
            virtuals: vec![0.0; sys.topology.links.len()],
        }
    }
}

/// `ψ̄_j` in m³/h: the largest total outflow dam `j` can release.
pub fn virtual_normalizer(sys: &System, link: usize) -> Result<f64> {
    let dam = &sys.spec.dams[sys.topology.links[link]];
    let mut best: f64 = 0.0;
    for k in 0..=1000 {
        let v = k as f64 / 1000.0;
        best = best.max(max_turbine_flow(dam, v)? + max_spill_flow(dam, v)?);
    }
    assert!(
        (best - dam.phi_max).abs() <= 1e-9 * dam.phi_max,
        "outflow capacity sweep disagrees with phi_max"
    );
    Ok(dam.phi_max * SECONDS_PER_HOUR)
}

/// Time-step data shared by every node problem of one step `[t, t + dt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepData {
    pub t: f64,
    pub dt: f64,
    /// kW, mean over the step
    pub demand: f64,
    /// m³/h per dam, mean over the step
    pub inflow: Vec<f64>,
    /// mean of `λ_j(t)·1[τ_j,T]` over the step
    pub lambda_virtual: Vec<f64>,
    /// mean of `λ_j(t+τ_j)·1[0,T-τ_j]` over the step
    pub lambda_release: Vec<f64>,
    /// 1 once the step lies in `[τ_j, T]`, else 0
    pub virtual_cap: Vec<f64>,
}

impl StepData {
    pub fn build(sys: &System, series: &Series, lambda: &MultiplierSet, t: f64, dt: f64) -> Result<Self> {
        let t1 = t + dt;
        let demand = series.demand.mean_over(t, t1)?;
        let inflow = series
            .inflows
            .iter()
            .map(|s| s.mean_over(t, t1))
            .collect::<Result<Vec<_>>>()?;
        let nl = sys.topology.links.len();
        let mut lambda_virtual = vec![0.0; nl];
        let mut lambda_release = vec![0.0; nl];
        let mut virtual_cap = vec![0.0; nl];
        for l in 0..nl {
            let tau = sys.tau(l);
            lambda_virtual[l] = lambda.mean_over(l, t, t1);
            lambda_release[l] = lambda.mean_over(l, t + tau, t1 + tau);
            if t >= tau - 1e-9 * dt.max(1.0) {
                virtual_cap[l] = 1.0;
            }
        }
        Ok(StepData {
            t,
            dt,
            demand,
            inflow,
            lambda_virtual,
            lambda_release,
            virtual_cap,
        })
    }
}

pub fn build_steps(sys: &System, series: &Series, lambda: &MultiplierSet, dt: f64, n_steps: usize) -> Result<Vec<StepData>> {
    (0..n_steps)
        .map(|n| StepData::build(sys, series, lambda, n as f64 * dt, dt))
        .collect()
}

/// Where the boundary rules of the state constraints come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundaryRule {
    /// Grid node: constraints active only on the faces.
    Node,
    /// Forward simulation: constraints active within `trigger` of a face, and
    /// the Euler step of length `dt` is kept inside `[0, 1]`.
    Forward { trigger: f64, dt: f64 },
}

/// Constraint description of one node problem.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibleSet {
    /// Allowed state velocity per dimension (per hour).
    pub drift_bounds: Vec<(f64, f64)>,
    /// Which boundary inequalities are active, one entry per state dimension:
    /// `-1` at the lower face, `1` at the upper face, `0` interior.
    pub active: Vec<i8>,
    /// Required generation, kW.
    pub demand: f64,
    pub dams: Vec<DamAtState>,
}

/// Box bounds are implicit in [`ExtendedControl`]; this returns the active
/// boundary inequalities and the balance target. Battery sign constraints
/// and dam inflow constraints are both expressed as drift-sign bounds.
pub fn admissible_set(sys: &System, step: &StepData, state: &[f64], rule: BoundaryRule) -> Result<AdmissibleSet> {
    let nd = sys.n_dams();
    let mut dams = Vec::with_capacity(nd);
    for (i, dam) in sys.spec.dams.iter().enumerate() {
        dams.push(DamAtState::new(dam, state[i])?);
    }
    let mut drift_bounds = Vec::with_capacity(sys.n_states());
    let mut active = Vec::with_capacity(sys.n_states());
    for &x in state.iter().take(sys.n_states()) {
        let (b, a) = face_bounds(x, rule);
        drift_bounds.push(b);
        active.push(a);
    }
    Ok(AdmissibleSet {
        drift_bounds,
        active,
        demand: step.demand,
        dams,
    })
}

pub(crate) fn face_bounds(x: f64, rule: BoundaryRule) -> ((f64, f64), i8) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut active = 0;
    match rule {
        BoundaryRule::Node => {
            if x <= 1e-12 {
                lo = 0.0;
                active = -1;
            }
            if x >= 1.0 - 1e-12 {
                hi = 0.0;
                active = 1;
            }
        }
        BoundaryRule::Forward { trigger, dt } => {
            if x <= trigger {
                lo = 0.0;
                active = -1;
            }
            if x >= 1.0 - trigger {
                hi = 0.0;
                active = 1;
            }
            lo = lo.max(-x / dt);
            hi = hi.min((1.0 - x) / dt);
        }
    }
    ((lo, hi), active)
}

/// State velocity per hour under `control`. `inflow` includes any delayed
/// upstream arrivals.
pub fn relaxed_drift(sys: &System, state: &[f64], control: &ExtendedControl, inflow: &[f64]) -> Result<Vec<f64>> {
    let mut f = Vec::with_capacity(sys.n_states());
    let psi: Vec<f64> = (0..sys.topology.links.len())
        .map(|l| virtual_normalizer(sys, l))
        .collect::<Result<_>>()?;
    for (i, dam) in sys.spec.dams.iter().enumerate() {
        let at = DamAtState::new(dam, state[i])?;
        let mut net = inflow[i] - at.outflow(control.turbine[i], control.spill[i]);
        for &j in &sys.topology.upstream[i] {
            if let Some(l) = sys.topology.link_of(j) {
                if let Some(z) = control.virtuals.get(l) {
                    net += psi[l] * z;
                }
            }
        }
        f.push(net / dam.volume_range());
    }
    if let Some(b) = &sys.spec.battery {
        f.push(-b.rate() * control.battery);
    }
    Ok(f)
}

/// Relaxed running cost `L` at time `t`, USD/h.
pub fn running_cost(sys: &System, t: f64, state: &[f64], control: &ExtendedControl, lambda: &MultiplierSet) -> Result<f64> {
    let mut cost = crate::system::instantaneous_cost(&sys.spec, control, state)?;
    let horizon = lambda.horizon;
    for (l, &j) in sys.topology.links.iter().enumerate() {
        let tau = sys.tau(l);
        if t >= tau && t <= horizon {
            if let Some(z) = control.virtuals.get(l) {
                cost += lambda.eval(l, t) * virtual_normalizer(sys, l)? * z;
            }
        }
        if t <= horizon - tau {
            let at = DamAtState::new(&sys.spec.dams[j], state[j])?;
            cost -= lambda.eval(l, t + tau) * at.outflow(control.turbine[j], control.spill[j]);
        }
    }
    Ok(cost)
}

/// Gradient of the value function at a node.
#[derive(Clone, Copy, Debug)]
pub enum Gradient<'a> {
    Linear(&'a [f64]),
    /// Forward and backward one-sided differences per dimension.
    Upwind { plus: &'a [f64], minus: &'a [f64] },
}

impl Gradient<'_> {
    fn pair(&self, k: usize) -> (f64, f64) {
        match self {
            Gradient::Linear(g) => (g[k], g[k]),
            Gradient::Upwind { plus, minus } => (plus[k], minus[k]),
        }
    }
}

/// Inputs of one pointwise Hamiltonian minimization.
#[derive(Clone, Copy, Debug)]
pub struct NodeInput<'a> {
    pub step: &'a StepData,
    pub dams: &'a [DamAtState],
    pub drift_bounds: &'a [(f64, f64)],
    pub gradient: Gradient<'a>,
    /// Delayed upstream arrivals in m³/h. `Some` removes the virtual controls.
    pub arrivals: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum DimMode {
    Folded(f64),
    Row { plus: f64, minus: f64 },
}

/// Minimizer of one node problem in normalized units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeSolution {
    pub turbine: Vec<f64>,
    pub spill: Vec<f64>,
    pub ffs: Vec<f64>,
    pub battery: f64,
    pub virtuals: Vec<f64>,
    /// State velocity per hour.
    pub drift: Vec<f64>,
    /// Hamiltonian value at the minimizer (gradient terms plus running cost), USD/h.
    pub value: f64,
    /// Running cost part `L`, USD/h.
    pub running_cost: f64,
    /// Primal running cost `C_I`, USD/h.
    pub primal_cost: f64,
}

impl NodeSolution {
    pub fn to_control(&self) -> ExtendedControl {
        ExtendedControl {
            turbine: self.turbine.clone(),
            spill: self.spill.clone(),
            ffs: self.ffs.clone(),
            battery: self.battery,
            virtuals: self.virtuals.clone(),
        }
    }
}

/// Cached system constants plus scratch space for repeated node solves.
#[derive(Clone, Debug)]
pub struct HamiltonianSolver {
    n_dams: usize,
    n_ffs: usize,
    has_battery: bool,
    ranges: Vec<f64>,
    k_h: Vec<f64>,
    ffs_power: Vec<f64>,
    ffs_cost: Vec<f64>,
    battery_power: f64,
    battery_rate: f64,
    c_bat: f64,
    /// per link: upstream dam, downstream dam, `ψ̄` in m³/h
    links: Vec<(usize, usize, f64)>,
    link_of_dam: Vec<Option<usize>>,
    lp: Lp,
    modes: Vec<DimMode>,
    pattern_dims: Vec<usize>,
    row_of_dim: Vec<Option<usize>>,
    inflow: Vec<f64>,
    best: Vec<f64>,
    pub sol: NodeSolution,
    pub lp_solves: usize,
}

impl HamiltonianSolver {
    pub fn new(sys: &System) -> Result<Self> {
        let links = sys
            .topology
            .links
            .iter()
            .enumerate()
            .map(|(l, &j)| {
                let down = sys.topology.downstream[j].expect("link without downstream");
                Ok((j, down, virtual_normalizer(sys, l)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (battery_power, battery_rate, c_bat) = match &sys.spec.battery {
            Some(b) => (b.p_max_discharge, b.rate(), b.c_bat()),
            None => (0.0, 0.0, 0.0),
        };
        let nd = sys.n_dams();
        Ok(HamiltonianSolver {
            n_dams: nd,
            n_ffs: sys.spec.ffs.len(),
            has_battery: sys.spec.battery.is_some(),
            ranges: sys.spec.dams.iter().map(|d| d.volume_range()).collect(),
            k_h: sys.spec.dams.iter().map(|d| d.k_h).collect(),
            ffs_power: sys.spec.ffs.iter().map(|f| f.p_max).collect(),
            ffs_cost: sys.spec.ffs.iter().map(|f| f.full_cost_rate()).collect(),
            battery_power,
            battery_rate,
            c_bat,
            link_of_dam: (0..nd).map(|i| sys.topology.link_of(i)).collect(),
            links,
            lp: Lp::new(),
            modes: Vec::new(),
            pattern_dims: Vec::new(),
            row_of_dim: Vec::new(),
            inflow: Vec::new(),
            best: Vec::new(),
            sol: NodeSolution::default(),
            lp_solves: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_dams + usize::from(self.has_battery)
    }

    fn n_vars_base(&self) -> usize {
        2 * self.n_dams + self.n_ffs + 2 * usize::from(self.has_battery) + self.links.len()
    }

    fn col_ffs(&self, k: usize) -> usize {
        2 * self.n_dams + k
    }

    fn col_battery(&self) -> usize {
        2 * self.n_dams + self.n_ffs
    }

    fn col_virtual(&self, l: usize) -> usize {
        2 * self.n_dams + self.n_ffs + 2 * usize::from(self.has_battery) + l
    }

    /// Exact minimizer of the node problem; result in `self.sol`, value returned.
    pub fn solve(&mut self, inp: &NodeInput) -> Result<f64> {
        let nd = self.n_dams;
        let ns = self.n_states();
        let relaxed = inp.arrivals.is_none();

        self.inflow.clear();
        for i in 0..nd {
            let arr = inp.arrivals.map_or(0.0, |a| a[i]);
            self.inflow.push(inp.step.inflow[i] + arr);
        }

        self.modes.clear();
        self.pattern_dims.clear();
        for k in 0..ns {
            let (fmin, fmax) = self.natural_drift_range(k, inp, relaxed);
            let (lo, hi) = inp.drift_bounds[k];
            let eff_lo = fmin.max(lo);
            let eff_hi = fmax.min(hi);
            let scale = fmax.abs().max(fmin.abs()).max(1e-300);
            if eff_lo > eff_hi + 1e-12 * scale {
                return Err(Error::Infeasible {
                    t_hours: inp.step.t,
                    shortfall_kw: 0.0,
                    context: format!("state dimension {k} cannot satisfy its boundary constraint"),
                });
            }
            let battery = k == nd;
            let cut = !battery && (lo > fmin + 1e-12 * scale || hi < fmax - 1e-12 * scale);
            let (dp, dm) = inp.gradient.pair(k);
            let mixed = eff_lo < 0.0 && eff_hi > 0.0;
            let mode = if !mixed {
                let s = if eff_lo >= 0.0 && eff_hi > 0.0 { dp } else { dm };
                if cut {
                    DimMode::Row { plus: s, minus: s }
                } else {
                    DimMode::Folded(s)
                }
            } else if dp == dm {
                if cut {
                    DimMode::Row { plus: dp, minus: dp }
                } else {
                    DimMode::Folded(dp)
                }
            } else if dp > dm {
                DimMode::Row { plus: dp, minus: dm }
            } else {
                self.pattern_dims.push(k);
                if cut {
                    DimMode::Row { plus: dp, minus: dp }
                } else {
                    DimMode::Folded(dp)
                }
            };
            self.modes.push(mode);
        }

        let patterns = 1usize << self.pattern_dims.len();
        let mut best_value = f64::INFINITY;
        let mut infeasible = None;
        for pat in 0..patterns {
            for (b, &k) in self.pattern_dims.clone().iter().enumerate() {
                let (dp, dm) = inp.gradient.pair(k);
                let s = if pat >> b & 1 == 0 { dp } else { dm };
                self.modes[k] = match self.modes[k] {
                    DimMode::Folded(_) => DimMode::Folded(s),
                    DimMode::Row { .. } => DimMode::Row { plus: s, minus: s },
                };
            }
            match self.solve_pattern(inp, relaxed) {
                Ok(v) => {
                    if v < best_value {
                        best_value = v;
                        self.best.clear();
                        self.best.extend_from_slice(self.lp.solution());
                    }
                }
                Err(e) => {
                    infeasible = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = infeasible {
            return Err(e);
        }
        let best = std::mem::take(&mut self.best);
        self.unpack(&best, inp, relaxed);
        self.best = best;
        self.sol.value = best_value;
        Ok(best_value)
    }

    /// Range of the state velocity over the control box, per hour.
    fn natural_drift_range(&self, k: usize, inp: &NodeInput, relaxed: bool) -> (f64, f64) {
        if k == self.n_dams {
            return (-self.battery_rate, self.battery_rate * self.c_bat);
        }
        let at = &inp.dams[k];
        let r = self.ranges[k];
        let mut extra = 0.0;
        if relaxed {
            for (l, &(_, down, psi)) in self.links.iter().enumerate() {
                if down == k {
                    extra += psi * inp.step.virtual_cap[l];
                }
            }
        }
        let i = self.inflow[k];
        ((i - at.turbine_cap - at.spill_cap) / r, (i + extra) / r)
    }

    fn solve_pattern(&mut self, inp: &NodeInput, relaxed: bool) -> Result<f64> {
        let nd = self.n_dams;
        let ns = self.n_states();
        let base = self.n_vars_base();
        self.row_of_dim.clear();
        let mut n_rows = 1;
        for k in 0..ns {
            if k < nd && matches!(self.modes[k], DimMode::Row { .. }) {
                self.row_of_dim.push(Some(n_rows));
                n_rows += 1;
            } else {
                self.row_of_dim.push(None);
            }
        }
        let n_vars = base + 2 * (n_rows - 1);
        self.lp.reset(n_vars, n_rows);
        let mut constant = 0.0;

        for i in 0..nd {
            let at = inp.dams[i];
            let r = self.ranges[i];
            let mut unit = self.k_h[i];
            if let Some(l) = self.link_of_dam[i] {
                unit -= inp.step.lambda_release[l];
            }
            let (mut ct, mut cs) = (unit * at.turbine_cap, unit * at.spill_cap);
            if let DimMode::Folded(s) = self.modes[i] {
                ct -= s * at.turbine_cap / r;
                cs -= s * at.spill_cap / r;
                constant += s * self.inflow[i] / r;
            }
            self.lp.set_var(2 * i, ct, 0.0, 1.0);
            self.lp.set_var(2 * i + 1, cs, 0.0, 1.0);
            self.lp.set_coef(0, 2 * i, at.power);
            if let Some(row) = self.row_of_dim[i] {
                self.lp.set_coef(row, 2 * i, -at.turbine_cap / r);
                self.lp.set_coef(row, 2 * i + 1, -at.spill_cap / r);
                self.lp.set_rhs(row, -self.inflow[i] / r);
            }
        }
        for k in 0..self.n_ffs {
            let c = self.col_ffs(k);
            self.lp.set_var(c, self.ffs_cost[k], 0.0, 1.0);
            self.lp.set_coef(0, c, self.ffs_power[k]);
        }
        if self.has_battery {
            let c = self.col_battery();
            let (lo, hi) = inp.drift_bounds[nd];
            let rate = self.battery_rate;
            // y in [-C, 1] with drift -rate·y inside [lo, hi]
            let y_lo = (-self.c_bat).max(-hi / rate);
            let y_hi = 1.0f64.min(-lo / rate);
            let (dis_lo, dis_hi) = (y_lo.max(0.0), y_hi.max(0.0));
            let (chg_lo, chg_hi) = ((-y_hi).max(0.0), (-y_lo).max(0.0));
            let (cd, cc) = match self.modes[nd] {
                DimMode::Folded(s) => (-rate * s, rate * s),
                DimMode::Row { plus, minus } => (-rate * minus, rate * plus),
            };
            self.lp.set_var(c, cd, dis_lo, dis_hi);
            self.lp.set_var(c + 1, cc, chg_lo, chg_hi);
            self.lp.set_coef(0, c, self.battery_power);
            self.lp.set_coef(0, c + 1, -self.battery_power);
        }
        for (l, &(_, down, psi)) in self.links.iter().enumerate() {
            let c = self.col_virtual(l);
            let cap = if relaxed { inp.step.virtual_cap[l] } else { 0.0 };
            let mut cost = inp.step.lambda_virtual[l] * psi;
            let r = self.ranges[down];
            if let DimMode::Folded(s) = self.modes[down] {
                cost += s * psi / r;
            }
            self.lp.set_var(c, cost, 0.0, cap);
            if let Some(row) = self.row_of_dim[down] {
                self.lp.set_coef(row, c, psi / r);
            }
        }
        let mut col = base;
        for k in 0..nd {
            let (Some(row), DimMode::Row { plus, minus }) = (self.row_of_dim[k], self.modes[k]) else {
                continue;
            };
            let (lo, hi) = inp.drift_bounds[k];
            let (fmin, fmax) = self.natural_drift_range(k, inp, relaxed);
            let (lo, hi) = (lo.max(fmin), hi.min(fmax));
            self.lp.set_var(col, plus, lo.max(0.0), hi.max(0.0));
            self.lp.set_var(col + 1, -minus, (-hi).max(0.0), (-lo).max(0.0));
            self.lp.set_coef(row, col, -1.0);
            self.lp.set_coef(row, col + 1, 1.0);
            col += 2;
        }
        self.lp.set_rhs(0, inp.step.demand);

        self.lp_solves += 1;
        match self.lp.solve() {
            LpStatus::Optimal => Ok(self.lp.objective_value() + constant),
            LpStatus::Infeasible(v) => {
                let shortfall = v[0];
                Err(Error::Infeasible {
                    t_hours: inp.step.t,
                    shortfall_kw: shortfall,
                    context: if v.iter().skip(1).any(|&x| x > 1e-9) {
                        "boundary constraints cannot be met".into()
                    } else {
                        "demand exceeds producible power".into()
                    },
                })
            }
        }
    }

    fn unpack(&mut self, x: &[f64], inp: &NodeInput, relaxed: bool) {
        let nd = self.n_dams;
        let s = &mut self.sol;
        s.turbine.clear();
        s.spill.clear();
        s.ffs.clear();
        s.virtuals.clear();
        s.drift.clear();
        let mut primal = 0.0;
        let mut lagr = 0.0;
        for i in 0..nd {
            let (t, sp) = (x[2 * i].clamp(0.0, 1.0), x[2 * i + 1].clamp(0.0, 1.0));
            s.turbine.push(t);
            s.spill.push(sp);
            let h = inp.dams[i].outflow(t, sp);
            primal += self.k_h[i] * h;
            if let Some(l) = self.link_of_dam[i] {
                lagr -= inp.step.lambda_release[l] * h;
            }
            s.drift.push(self.inflow[i] - h);
        }
        for k in 0..self.n_ffs {
            let v = x[2 * nd + k].clamp(0.0, 1.0);
            s.ffs.push(v);
            primal += self.ffs_cost[k] * v;
        }
        if self.has_battery {
            let c = 2 * nd + self.n_ffs;
            s.battery = x[c] - x[c + 1];
        } else {
            s.battery = 0.0;
        }
        let vbase = 2 * nd + self.n_ffs + 2 * usize::from(self.has_battery);
        for (l, &(_, down, psi)) in self.links.iter().enumerate() {
            let z = if relaxed { x[vbase + l].clamp(0.0, 1.0) } else { 0.0 };
            if relaxed {
                s.virtuals.push(z);
                lagr += inp.step.lambda_virtual[l] * psi * z;
            }
            s.drift[down] += psi * z;
        }
        for i in 0..nd {
            s.drift[i] /= self.ranges[i];
        }
        if self.has_battery {
            s.drift.push(-self.battery_rate * s.battery);
        }
        s.primal_cost = primal;
        s.running_cost = primal + lagr;
    }
}

/// Convenience wrapper: builds the constraint description and solves one
/// node problem, returning the minimizing control and the Hamiltonian value.
pub fn minimize_hamiltonian(
    sys: &System,
    step: &StepData,
    state: &[f64],
    gradient: Gradient,
    rule: BoundaryRule,
) -> Result<(ExtendedControl, f64)> {
    let set = admissible_set(sys, step, state, rule)?;
    let mut solver = HamiltonianSolver::new(sys)?;
    let v = solver.solve(&NodeInput {
        step,
        dams: &set.dams,
        drift_bounds: &set.drift_bounds,
        gradient,
        arrivals: None,
    })?;
    Ok((solver.sol.to_control(), v))
}

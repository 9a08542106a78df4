//! Physical description of the power system: dams in a cascade, fossil-fuel
//! stations, one optional battery, and the time series that drive them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relaxation::ExtendedControl;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Maximum turbine flow as a function of the head difference `H(v) - h0`, in m³/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurbineFlow {
    Constant {
        value: f64,
    },
    /// `c2·Δh² + c1·Δh + c0`
    Polynomial { coeffs: [f64; 3] },
    /// `below` applies for `Δh <= breakpoint`, `above` otherwise.
    Piecewise {
        breakpoint: f64,
        below: [f64; 3],
        above: [f64; 3],
    },
}

impl TurbineFlow {
    pub fn eval(&self, head_difference: f64) -> f64 {
        match self {
            TurbineFlow::Constant { value } => *value,
            TurbineFlow::Polynomial { coeffs } => poly2(coeffs, head_difference),
            TurbineFlow::Piecewise {
                breakpoint,
                below,
                above,
            } => {
                if head_difference <= *breakpoint {
                    poly2(below, head_difference)
                } else {
                    poly2(above, head_difference)
                }
            }
        }
    }

    pub fn breakpoint(&self) -> Option<f64> {
        match self {
            TurbineFlow::Piecewise { breakpoint, .. } => Some(*breakpoint),
            _ => None,
        }
    }
}

fn poly2(c: &[f64; 3], x: f64) -> f64 {
    (c[0] * x + c[1]) * x + c[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DamSpec {
    /// Label used by `downstream` references and in the config section name.
    pub index: usize,
    pub name: String,
    /// Minimum volume, m³.
    pub v_min: f64,
    /// Maximum volume, m³.
    pub v_max: f64,
    /// `(b2, b1, b0)`: water level in m as a quadratic of the normalized volume.
    pub head_coeffs: [f64; 3],
    /// Tailwater level, m.
    pub h0: f64,
    pub eta: f64,
    /// Head-loss coefficient applied to the turbine flow in m³/s.
    pub d: f64,
    pub turbine_flow: TurbineFlow,
    /// Total outflow capacity (turbine + spill), m³/s.
    pub phi_max: f64,
    /// Water cost, USD/m³.
    pub k_h: f64,
    pub downstream: Option<usize>,
    /// Water travel time to the downstream dam, hours.
    pub tau: Option<f64>,
}

impl DamSpec {
    pub fn volume_range(&self) -> f64 {
        self.v_max - self.v_min
    }

    /// Outflow capacity in m³/h.
    pub fn phi_max_per_hour(&self) -> f64 {
        self.phi_max * SECONDS_PER_HOUR
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfsSpec {
    pub index: usize,
    pub name: String,
    /// kW
    pub p_max: f64,
    /// USD/MWh
    pub k_f: f64,
}

impl FfsSpec {
    /// Cost in USD/h at full output.
    pub fn full_cost_rate(&self) -> f64 {
        self.k_f * self.p_max / 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatterySpec {
    /// kWh
    pub capacity: f64,
    /// kW
    pub p_max_discharge: f64,
    /// kW, magnitude
    pub p_max_charge: f64,
}

impl BatterySpec {
    pub fn c_bat(&self) -> f64 {
        self.p_max_charge / self.p_max_discharge
    }

    /// `P̄_A / Ā`, per hour.
    pub fn rate(&self) -> f64 {
        self.p_max_discharge / self.capacity
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub dams: Vec<DamSpec>,
    pub ffs: Vec<FfsSpec>,
    pub battery: Option<BatterySpec>,
}

/// Cascade links resolved to positions in `SystemSpec::dams`.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeTopology {
    pub downstream: Vec<Option<usize>>,
    /// `B(i)`: dams whose outflow reaches dam `i`.
    pub upstream: Vec<Vec<usize>>,
    /// `B_U`: every dam with a downstream neighbor, in declaration order.
    pub links: Vec<usize>,
}

impl CascadeTopology {
    pub fn link_of(&self, dam: usize) -> Option<usize> {
        self.links.iter().position(|&j| j == dam)
    }
}

/// A validated system together with its resolved topology.
#[derive(Clone, Debug)]
pub struct System {
    pub spec: SystemSpec,
    pub topology: CascadeTopology,
}

impl System {
    pub fn new(spec: SystemSpec) -> Result<Self> {
        let topology = validate_topology(&spec)?;
        Ok(System { spec, topology })
    }

    pub fn n_dams(&self) -> usize {
        self.spec.dams.len()
    }

    /// Number of state dimensions: one per dam plus the battery charge.
    pub fn n_states(&self) -> usize {
        self.n_dams() + usize::from(self.spec.battery.is_some())
    }

    pub fn tau(&self, link: usize) -> f64 {
        let j = self.topology.links[link];
        self.spec.dams[j].tau.unwrap_or(0.0)
    }
}

fn check_unit(what: &'static str, v: f64) -> Result<()> {
    const SLACK: f64 = 1e-12;
    if !(-SLACK..=1.0 + SLACK).contains(&v) || v.is_nan() {
        return Err(Error::Domain {
            what,
            value: v,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

pub fn head(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    check_unit("normalized volume", v_hat)?;
    Ok(poly2(&dam.head_coeffs, v_hat))
}

/// Maximum turbine flow in m³/s, clamped to `(0, φ̄_max]`.
pub fn max_turbine_flow(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    let h = head(dam, v_hat)?;
    Ok(clamp_flow(dam, dam.turbine_flow.eval(h - dam.h0)))
}

fn clamp_flow(dam: &DamSpec, raw: f64) -> f64 {
    raw.clamp(dam.phi_max * 1e-9, dam.phi_max)
}

/// Spill capacity in m³/s.
pub fn max_spill_flow(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    Ok(dam.phi_max - max_turbine_flow(dam, v_hat)?)
}

fn raw_power_coefficient(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    let h = head(dam, v_hat)?;
    let q = max_turbine_flow(dam, v_hat)?;
    Ok(dam.eta * q * (h - dam.h0 - dam.d * q))
}

/// Power at full turbine opening, kW.
pub fn power_coefficient(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    let s = raw_power_coefficient(dam, v_hat)?;
    if s < 0.0 {
        return Err(Error::Model(format!(
            "dam {} ({}): net head below tailwater at v = {v_hat}",
            dam.index, dam.name
        )));
    }
    Ok(s)
}

/// Like [`power_coefficient`] but a dam without usable head produces nothing
/// instead of failing.
pub fn available_power_coefficient(dam: &DamSpec, v_hat: f64) -> Result<f64> {
    Ok(raw_power_coefficient(dam, v_hat)?.max(0.0))
}

/// Turbine and spill capacities plus power coefficient at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DamAtState {
    /// m³/h
    pub turbine_cap: f64,
    /// m³/h
    pub spill_cap: f64,
    /// kW
    pub power: f64,
}

impl DamAtState {
    pub fn new(dam: &DamSpec, v_hat: f64) -> Result<Self> {
        let q = max_turbine_flow(dam, v_hat)?;
        Ok(DamAtState {
            turbine_cap: q * SECONDS_PER_HOUR,
            spill_cap: (dam.phi_max - q) * SECONDS_PER_HOUR,
            power: available_power_coefficient(dam, v_hat)?,
        })
    }

    pub fn outflow(&self, turbine: f64, spill: f64) -> f64 {
        self.turbine_cap * turbine + self.spill_cap * spill
    }
}

/// Running cost of the primal problem, USD/h. Time-invariant.
pub fn instantaneous_cost(sys: &SystemSpec, control: &ExtendedControl, state: &[f64]) -> Result<f64> {
    let mut cost = 0.0;
    for (i, dam) in sys.dams.iter().enumerate() {
        let at = DamAtState::new(dam, state[i])?;
        cost += dam.k_h * at.outflow(control.turbine[i], control.spill[i]);
    }
    for (k, f) in sys.ffs.iter().enumerate() {
        cost += f.full_cost_rate() * control.ffs[k];
    }
    Ok(cost)
}

/// Checks every type invariant and resolves the cascade links.
pub fn validate_topology(spec: &SystemSpec) -> Result<CascadeTopology> {
    let mut diag = Vec::new();
    let n = spec.dams.len();

    for (p, dam) in spec.dams.iter().enumerate() {
        let tag = format!("dam.{}", dam.index);
        if spec.dams[..p].iter().any(|o| o.index == dam.index) {
            diag.push(format!("{tag}: duplicate index"));
        }
        if !(dam.v_min < dam.v_max) {
            diag.push(format!("{tag}: v_min must be below v_max"));
        }
        if !(dam.eta > 0.0) {
            diag.push(format!("{tag}: eta must be positive"));
        }
        if !(dam.d > 0.0) {
            diag.push(format!("{tag}: d must be positive"));
        }
        if !(dam.k_h >= 0.0) {
            diag.push(format!("{tag}: k_h must be nonnegative"));
        }
        if !(dam.phi_max > 0.0) {
            diag.push(format!("{tag}: phi_max must be positive"));
        }
        match (dam.downstream, dam.tau) {
            (Some(_), Some(t)) if t > 0.0 => {}
            (Some(_), _) => diag.push(format!("{tag}: tau must be positive when downstream is set")),
            (None, Some(_)) => diag.push(format!("{tag}: tau given without downstream")),
            (None, None) => {}
        }
        if let Some(ds) = dam.downstream {
            if ds == dam.index {
                diag.push(format!("{tag}: downstream points to itself"));
            } else if !spec.dams.iter().any(|o| o.index == ds) {
                diag.push(format!("{tag}: downstream dam {ds} does not exist"));
            }
        }
        let [b2, b1, _] = dam.head_coeffs;
        // derivative 2·b2·v + b1 is linear, so checking both ends suffices
        if b1 < 0.0 || 2.0 * b2 + b1 < 0.0 {
            diag.push(format!("{tag}: head polynomial is not nondecreasing on [0,1]"));
        }
        if let TurbineFlow::Constant { value } = dam.turbine_flow {
            if !(value > 0.0 && value <= dam.phi_max) {
                diag.push(format!("{tag}: constant turbine flow must lie in (0, phi_max]"));
            }
        }
    }

    let pos_of = |idx: usize| spec.dams.iter().position(|d| d.index == idx);
    let downstream: Vec<Option<usize>> = spec
        .dams
        .iter()
        .map(|d| d.downstream.and_then(pos_of))
        .collect();

    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(next) = downstream[cur] {
            cur = next;
            steps += 1;
            if cur == start || steps > n {
                diag.push(format!(
                    "dam.{}: cycle in downstream links",
                    spec.dams[start].index
                ));
                break;
            }
        }
    }

    for (k, f) in spec.ffs.iter().enumerate() {
        if spec.ffs[..k].iter().any(|o| o.index == f.index) {
            diag.push(format!("ffs.{}: duplicate index", f.index));
        }
        if !(f.p_max > 0.0) {
            diag.push(format!("ffs.{}: p_max must be positive", f.index));
        }
        if !(f.k_f > 0.0) {
            diag.push(format!("ffs.{}: k_f must be positive", f.index));
        }
    }
    if let Some(b) = &spec.battery {
        if !(b.capacity > 0.0) {
            diag.push("battery: capacity must be positive".into());
        }
        if !(b.p_max_discharge > 0.0) {
            diag.push("battery: p_max_discharge must be positive".into());
        }
        if !(b.p_max_charge > 0.0) {
            diag.push("battery: p_max_charge must be positive".into());
        }
    }

    if !diag.is_empty() {
        return Err(Error::Validation(diag));
    }

    let mut upstream = vec![Vec::new(); n];
    for (j, ds) in downstream.iter().enumerate() {
        if let Some(i) = ds {
            upstream[*i].push(j);
        }
    }
    let links = (0..n).filter(|&j| downstream[j].is_some()).collect();
    Ok(CascadeTopology {
        downstream,
        upstream,
        links,
    })
}

/// Sampled series, linearly interpolated between samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    samples: Vec<(f64, f64)>,
}

impl TimeSeries {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Mismatch("time series has no samples".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Mismatch(format!(
                    "time series times must be strictly increasing (t = {} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::Mismatch("time series contains non-finite values".into()));
        }
        Ok(TimeSeries { samples })
    }

    pub fn constant(value: f64, horizon: f64) -> Self {
        TimeSeries {
            samples: vec![(0.0, value), (horizon, value)],
        }
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].0
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    pub fn covers(&self, a: f64, b: f64) -> bool {
        self.start() <= a + 1e-9 && self.end() >= b - 1e-9
    }

    fn check(&self, t: f64) -> Result<()> {
        if t < self.start() - 1e-9 || t > self.end() + 1e-9 || t.is_nan() {
            return Err(Error::Domain {
                what: "time",
                value: t,
                lo: self.start(),
                hi: self.end(),
            });
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        let s = &self.samples;
        if s.len() == 1 || t <= s[0].0 {
            return Ok(s[0].1);
        }
        let k = s.partition_point(|p| p.0 <= t);
        if k >= s.len() {
            return Ok(s[s.len() - 1].1);
        }
        let (t0, v0) = s[k - 1];
        let (t1, v1) = s[k];
        Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }

    /// Mean of the interpolant over `[a, b]`.
    pub fn mean_over(&self, a: f64, b: f64) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        if b <= a {
            return self.value_at(a);
        }
        let mut knots = vec![a];
        knots.extend(self.samples.iter().map(|p| p.0).filter(|&t| t > a && t < b));
        knots.push(b);
        let mut area = 0.0;
        let mut prev = self.value_at(a)?;
        for w in knots.windows(2) {
            let next = self.value_at(w[1])?;
            area += 0.5 * (prev + next) * (w[1] - w[0]);
            prev = next;
        }
        Ok(area / (b - a))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        TimeSeries {
            samples: self.samples.iter().map(|&(t, v)| (t, v * factor)).collect(),
        }
    }

    pub fn max_value(&self) -> f64 {
        self.samples.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Demand (kW) and per-dam natural inflow (m³/h), indexed by dam position.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub demand: TimeSeries,
    pub inflows: Vec<TimeSeries>,
}

impl Series {
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        if !self.demand.covers(0.0, horizon) {
            return Err(Error::Mismatch(format!(
                "demand series covers [{}, {}] but the horizon is [0, {horizon}]",
                self.demand.start(),
                self.demand.end()
            )));
        }
        for (i, s) in self.inflows.iter().enumerate() {
            if !s.covers(0.0, horizon) {
                return Err(Error::Mismatch(format!(
                    "inflow series of dam position {i} does not cover [0, {horizon}]"
                )));
            }
        }
        Ok(())
    }
}

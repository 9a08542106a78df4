//! Brute-force references. They only use the capacity formulas of the
//! system model and rebuild drift and cost by hand.

#![allow(dead_code)]

use cascade_dispatch::relaxation::StepData;
use cascade_dispatch::system::*;

/// Per-dam quantities at one state, m³/h and kW.
pub struct Caps {
    pub tcap: Vec<f64>,
    pub scap: Vec<f64>,
    pub power: Vec<f64>,
}

pub fn caps(sys: &System, state: &[f64]) -> Caps {
    let mut c = Caps {
        tcap: vec![],
        scap: vec![],
        power: vec![],
    };
    for (i, d) in sys.spec.dams.iter().enumerate() {
        let q = max_turbine_flow(d, state[i]).unwrap();
        c.tcap.push(q * 3600.0);
        c.scap.push((d.phi_max - q) * 3600.0);
        c.power.push(power_coefficient(d, state[i]).unwrap());
    }
    c
}

/// Full control in normalized units: turbine, spill, ffs, battery, virtual.
#[derive(Clone, Debug)]
pub struct Ctrl {
    pub tur: Vec<f64>,
    pub spill: Vec<f64>,
    pub ffs: Vec<f64>,
    pub bat: f64,
    pub z: Vec<f64>,
}

pub fn psi_bar(sys: &System, l: usize) -> f64 {
    sys.spec.dams[sys.topology.links[l]].phi_max * 3600.0
}

/// State velocity per hour under the relaxed dynamics.
pub fn drift(sys: &System, step: &StepData, c: &Caps, u: &Ctrl) -> Vec<f64> {
    let nd = sys.n_dams();
    let mut f = Vec::new();
    for i in 0..nd {
        let mut net = step.inflow[i] - c.tcap[i] * u.tur[i] - c.scap[i] * u.spill[i];
        for (l, &j) in sys.topology.links.iter().enumerate() {
            if sys.topology.downstream[j] == Some(i) {
                net += psi_bar(sys, l) * u.z[l];
            }
        }
        f.push(net / sys.spec.dams[i].volume_range());
    }
    if let Some(b) = &sys.spec.battery {
        f.push(-b.p_max_discharge / b.capacity * u.bat);
    }
    f
}

/// Primal cost rate, USD/h.
pub fn primal_rate(sys: &System, c: &Caps, u: &Ctrl) -> f64 {
    let mut v = 0.0;
    for (i, d) in sys.spec.dams.iter().enumerate() {
        v += d.k_h * (c.tcap[i] * u.tur[i] + c.scap[i] * u.spill[i]);
    }
    for (k, f) in sys.spec.ffs.iter().enumerate() {
        v += f.k_f * f.p_max / 1000.0 * u.ffs[k];
    }
    v
}

/// Relaxed running cost with step-averaged multipliers, USD/h.
pub fn lagrangian_rate(sys: &System, step: &StepData, c: &Caps, u: &Ctrl) -> f64 {
    let mut v = primal_rate(sys, c, u);
    for (l, &j) in sys.topology.links.iter().enumerate() {
        v += step.lambda_virtual[l] * psi_bar(sys, l) * u.z[l];
        v -= step.lambda_release[l] * (c.tcap[j] * u.tur[j] + c.scap[j] * u.spill[j]);
    }
    v
}

pub fn hamiltonian(sys: &System, step: &StepData, c: &Caps, g: &[f64], u: &Ctrl) -> f64 {
    let f = drift(sys, step, c, u);
    lagrangian_rate(sys, step, c, u) + g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>()
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
}

/// Result of a lattice search: best value and the largest error the lattice
/// spacing can explain.
pub struct LatticeMin {
    pub value: f64,
    pub resolution: f64,
}

/// Lattice minimum of the relaxed Hamiltonian at an interior dam state.
/// Turbines and the battery are enumerated jointly with the single FFS
/// closing the balance; spill and virtual controls enter separably and are
/// enumerated one at a time.
pub fn lattice_hamiltonian(sys: &System, step: &StepData, state: &[f64], g: &[f64], n: usize) -> LatticeMin {
    assert_eq!(sys.spec.ffs.len(), 1, "lattice oracle needs exactly one FFS");
    let nd = sys.n_dams();
    let nl = sys.topology.links.len();
    let c = caps(sys, state);
    let ffs = &sys.spec.ffs[0];
    let (c_bat, has_bat) = match &sys.spec.battery {
        Some(b) => (b.p_max_charge / b.p_max_discharge, true),
        None => (0.0, false),
    };
    let p_bat = sys.spec.battery.as_ref().map_or(0.0, |b| b.p_max_discharge);
    // battery sign constraints at the faces of the charge dimension
    let (mut blo, mut bhi) = (-c_bat, if has_bat { 1.0 } else { 0.0 });
    if has_bat {
        let a = state[nd];
        if a >= 1.0 {
            blo = 0.0;
        }
        if a <= 0.0 {
            bhi = 0.0;
        }
    }
    let zero = Ctrl {
        tur: vec![0.0; nd],
        spill: vec![0.0; nd],
        ffs: vec![0.0],
        bat: 0.0,
        z: vec![0.0; nl],
    };
    let h = |u: &Ctrl| hamiltonian(sys, step, &c, g, u);
    let h0 = h(&zero);

    // joint part
    let mut dims: Vec<(f64, f64)> = vec![(0.0, 1.0); nd];
    if has_bat {
        dims.push((blo, bhi));
    }
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; dims.len()];
    let total = n.pow(dims.len() as u32);
    for _ in 0..total {
        let mut u = zero.clone();
        let mut gen = 0.0;
        for i in 0..nd {
            u.tur[i] = dims[i].0 + (dims[i].1 - dims[i].0) * idx[i] as f64 / (n - 1) as f64;
            gen += c.power[i] * u.tur[i];
        }
        if has_bat {
            let (lo, hi) = dims[nd];
            u.bat = lo + (hi - lo) * idx[nd] as f64 / (n - 1) as f64;
            gen += p_bat * u.bat;
        }
        let slack = (step.demand - gen) / ffs.p_max;
        if (-1e-12..=1.0 + 1e-12).contains(&slack) {
            u.ffs[0] = slack.clamp(0.0, 1.0);
            best = best.min(h(&u) - h0);
        }
        for d in 0..idx.len() {
            idx[d] += 1;
            if idx[d] < n {
                break;
            }
            idx[d] = 0;
        }
    }
    // sensitivity of each lattice coordinate with the FFS absorbing it
    let ffs_unit = ffs.k_f * ffs.p_max / 1000.0;
    let mut resolution = 0.0;
    for (d, (lo, hi)) in dims.iter().enumerate() {
        let mut u = zero.clone();
        let power = if d < nd {
            u.tur[d] = 1.0;
            c.power[d]
        } else {
            u.bat = 1.0;
            p_bat
        };
        let coef = h(&u) - h0 - ffs_unit * power / ffs.p_max;
        resolution += coef.abs() * (hi - lo) / (n - 1) as f64;
    }

    // separable part
    let mut sep = 0.0;
    for i in 0..nd {
        let m = grid(0.0, 1.0, n)
            .map(|s| {
                let mut u = zero.clone();
                u.spill[i] = s;
                h(&u) - h0
            })
            .fold(f64::INFINITY, f64::min);
        sep += m;
    }
    for l in 0..nl {
        let m = grid(0.0, step.virtual_cap[l], n)
            .map(|s| {
                let mut u = zero.clone();
                u.z[l] = s;
                h(&u) - h0
            })
            .fold(f64::INFINITY, f64::min);
        sep += m;
    }
    LatticeMin {
        value: h0 + best + sep,
        resolution,
    }
}

/// Multilinear interpolation of a nodal array with `nodes[k]` points per axis
/// on `[0, 1]`; the first axis varies fastest.
pub fn interpolate(values: &[f64], nodes: &[usize], x: &[f64]) -> f64 {
    let d = nodes.len();
    let mut base = vec![0usize; d];
    let mut w = vec![0.0; d];
    for k in 0..d {
        let s = x[k].clamp(0.0, 1.0) * (nodes[k] - 1) as f64;
        let i = (s.floor() as usize).min(nodes[k] - 2);
        base[k] = i;
        w[k] = s - i as f64;
    }
    let mut out = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut flat = 0;
        let mut stride = 1;
        for k in 0..d {
            let bit = corner >> k & 1;
            weight *= if bit == 1 { w[k] } else { 1.0 - w[k] };
            flat += (base[k] + bit) * stride;
            stride *= nodes[k];
        }
        if weight != 0.0 {
            out += weight * values[flat];
        }
    }
    out
}

/// Backward dynamic programming over a control lattice for a system with one
/// dam, one FFS and a battery and no cascade links. States are interpolated
/// multilinearly between the same nodes the HJB solver uses; the FFS closes
/// the balance. Besides the lattice, each control also tries the values that
/// put the next state exactly on a face or switch the FFS off. Returns the value at time 0 for every node.
pub fn dp_values(sys: &System, steps: &[StepData], nodes: &[usize], n_ctrl: usize) -> Vec<f64> {
    assert_eq!(sys.n_dams(), 1);
    assert!(sys.topology.links.is_empty());
    let b = sys.spec.battery.as_ref().expect("battery");
    let ffs = &sys.spec.ffs[0];
    let c_bat = b.p_max_charge / b.p_max_discharge;
    let n_nodes: usize = nodes.iter().product();
    let mut next = vec![0.0; n_nodes];
    let mut cur = vec![0.0; n_nodes];
    for step in steps.iter().rev() {
        for node in 0..n_nodes {
            let x = [
                (node % nodes[0]) as f64 / (nodes[0] - 1) as f64,
                (node / nodes[0]) as f64 / (nodes[1] - 1) as f64,
            ];
            let c = caps(sys, &x);
            let vol = sys.spec.dams[0].volume_range();
            let rate = b.p_max_discharge / b.capacity;
            // lattice points plus the vertices where a constraint becomes tight
            let with = |mut v: Vec<f64>, extra: &[f64], lo: f64, hi: f64| {
                v.extend(extra.iter().filter(|e| e.is_finite() && (lo..=hi).contains(*e)));
                v
            };
            let top = (x[0] - 1.0) * vol / step.dt + step.inflow[0];
            let turs = with(grid(0.0, 1.0, n_ctrl).collect(), &[top / c.tcap[0]], 0.0, 1.0);
            let mut best = f64::INFINITY;
            for &tur in &turs {
                let spills = with(
                    grid(0.0, 1.0, n_ctrl).collect(),
                    &[(top - c.tcap[0] * tur) / c.scap[0]],
                    0.0,
                    1.0,
                );
                let bats = with(
                    grid(-c_bat, 1.0, n_ctrl).collect(),
                    &[
                        (step.demand - c.power[0] * tur) / b.p_max_discharge,
                        x[1] / (rate * step.dt),
                        (x[1] - 1.0) / (rate * step.dt),
                    ],
                    -c_bat,
                    1.0,
                );
                for &spill in &spills {
                    for &bat in &bats {
                        let slack = (step.demand - c.power[0] * tur - b.p_max_discharge * bat) / ffs.p_max;
                        if !(-1e-12..=1.0 + 1e-12).contains(&slack) {
                            continue;
                        }
                        let u = Ctrl {
                            tur: vec![tur],
                            spill: vec![spill],
                            ffs: vec![slack.clamp(0.0, 1.0)],
                            bat,
                            z: vec![],
                        };
                        let f = drift(sys, step, &c, &u);
                        let y = [x[0] + step.dt * f[0], x[1] + step.dt * f[1]];
                        // leaving the box is not allowed
                        if y.iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
                            continue;
                        }
                        let y = [y[0].clamp(0.0, 1.0), y[1].clamp(0.0, 1.0)];
                        let v = step.dt * primal_rate(sys, &c, &u) + interpolate(&next, nodes, &y);
                        best = best.min(v);
                    }
                }
            }
            assert!(best.is_finite(), "no admissible lattice control at node {node}");
            cur[node] = best;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    next
}

mod common;

use cascade_dispatch::relaxation::*;
use cascade_dispatch::system::*;
use cascade_dispatch::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::lattice_hamiltonian;
use common::{toy_cascade, toy_series, toy_single, uruguay};

fn step_at(sys: &System, lambda: &MultiplierSet, t: f64, demand: f64, inflow_m3s: f64) -> StepData {
    let horizon = lambda.horizon;
    let series = Series {
        demand: TimeSeries::constant(demand, horizon),
        inflows: (0..sys.n_dams())
            .map(|_| TimeSeries::constant(inflow_m3s * SECONDS_PER_HOUR, horizon))
            .collect(),
    };
    StepData::build(sys, &series, lambda, t, 0.25).unwrap()
}

#[test]
fn virtual_normalizers_match_capacity() {
    let sys = uruguay();
    assert!((virtual_normalizer(&sys, 0).unwrap() - 1371.74 * 3600.0).abs() < 1e-6);
    assert!((virtual_normalizer(&sys, 1).unwrap() - 1799.68 * 3600.0).abs() < 1e-6);
    let toy = toy_cascade();
    assert_eq!(virtual_normalizer(&toy, 0).unwrap(), 100.0 * 3600.0);
}

#[test]
fn multiplier_segments_and_evaluation() {
    let lam = MultiplierSet::constant(24.0, &[6.0, 10.0], 2, &[1.0, 2.0]);
    assert_eq!(lam.segments(0), 2);
    assert_eq!(lam.segment_width(0), 9.0);
    assert_eq!(lam.segment_start(1, 1), 17.0);
    assert_eq!(lam.eval(0, 3.0), 0.0);
    assert_eq!(lam.eval(0, 6.0), 1.0);
    assert_eq!(lam.eval(0, 30.0), 0.0);
    let mut l = lam.clone();
    l.links[0].coeffs = vec![1.0, 3.0];
    assert_eq!(l.eval(0, 14.999), 1.0);
    assert_eq!(l.eval(0, 15.0), 3.0);
    // mean over [12, 18): half in each segment
    assert!((l.mean_over(0, 12.0, 18.0) - 2.0).abs() < 1e-12);
    assert_eq!(lam.dim(), 4);
}

#[test]
fn refinement_preserves_values() {
    let mut lam = MultiplierSet::constant(24.0, &[6.0, 10.0], 2, &[0.0, 0.0]);
    lam.links[0].coeffs = vec![-1.68e-4, 3e-4];
    lam.links[1].coeffs = vec![-8.92e-4, 1e-5];
    let fine = lam.refine();
    assert_eq!(fine.level, 3);
    assert_eq!(fine.links[0].coeffs, vec![-1.68e-4, -1.68e-4, 3e-4, 3e-4]);
    for k in 0..=2400 {
        let t = k as f64 * 0.01;
        for l in 0..2 {
            assert_eq!(fine.eval(l, t), lam.eval(l, t), "link {l} at {t}");
        }
    }
}

#[test]
fn interior_state_adds_no_boundary_rows() {
    let sys = toy_cascade();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[0.0]);
    let step = step_at(&sys, &lam, 0.0, 3e4, 30.0);
    let set = admissible_set(&sys, &step, &[0.5, 0.5, 0.5], BoundaryRule::Node).unwrap();
    assert!(set.active.iter().all(|&a| a == 0));
    assert!(set.drift_bounds.iter().all(|b| b.0 == f64::NEG_INFINITY && b.1 == f64::INFINITY));
    assert_eq!(set.demand, 3e4);
}

#[test]
fn full_battery_cannot_charge() {
    let sys = toy_single();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[]);
    let step = step_at(&sys, &lam, 0.0, 2e4, 30.0);
    let set = admissible_set(&sys, &step, &[0.5, 1.0], BoundaryRule::Node).unwrap();
    assert_eq!(set.active[1], 1);
    // charge velocity is -rate·φ_A, so φ_A >= 0 means velocity <= 0
    assert_eq!(set.drift_bounds[1].1, 0.0);
    // cheap charging would be taken if allowed: strongly negative gradient on charge
    let (c, _) = minimize_hamiltonian(&sys, &step, &[0.5, 1.0], Gradient::Linear(&[0.0, -1e9]), BoundaryRule::Node).unwrap();
    assert!(c.battery >= -1e-12, "{}", c.battery);
}

#[test]
fn full_independent_dam_must_pass_its_inflow() {
    let sys = uruguay();
    let lam = MultiplierSet::for_system(&sys, 24.0, 1, &[0.0, 0.0]);
    let mut step = step_at(&sys, &lam, 12.0, 5e5, 0.0);
    step.inflow[3] = 2675.0 * 3600.0;
    let state = [0.5, 0.5, 0.5, 1.0, 0.5];
    let set = admissible_set(&sys, &step, &state, BoundaryRule::Node).unwrap();
    assert_eq!(set.active[3], 1);
    assert_eq!(set.drift_bounds[3].1, 0.0);
    // water is expensive, yet the full dam must release at least the inflow
    let (c, _) = minimize_hamiltonian(&sys, &step, &state, Gradient::Linear(&[0.0; 5]), BoundaryRule::Node).unwrap();
    let at = DamAtState::new(&sys.spec.dams[3], 1.0).unwrap();
    let out = at.outflow(c.turbine[3], c.spill[3]);
    assert!(out >= step.inflow[3] * (1.0 - 1e-9), "{out} < {}", step.inflow[3]);
}

#[test]
fn relaxed_drift_examples() {
    let sys = toy_cascade();
    let zero = ExtendedControl::zeros(&sys);
    let f = relaxed_drift(&sys, &[0.5, 0.5, 0.5], &zero, &[0.0, 0.0]).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));

    let mut c = zero.clone();
    c.battery = 1.0;
    let f = relaxed_drift(&sys, &[0.5, 0.5, 0.5], &c, &[0.0, 0.0]).unwrap();
    assert!((f[2] + 5e3 / 2e4).abs() < 1e-12);

    let mut c = zero.clone();
    c.virtuals[0] = 1.0;
    let f = relaxed_drift(&sys, &[0.5, 0.5, 0.5], &c, &[0.0, 0.0]).unwrap();
    assert!((f[1] - 100.0 * 3600.0 / 2e6).abs() < 1e-12);
    assert_eq!(f[0], 0.0);
}

#[test]
fn uruguay_battery_drift() {
    let sys = uruguay();
    let mut c = ExtendedControl::zeros(&sys);
    c.battery = 1.0;
    let f = relaxed_drift(&sys, &[0.5; 5], &c, &[0.0; 4]).unwrap();
    assert!((f[4] + 1e5 / 1.4e5).abs() < 1e-12);
    assert!((f[4].abs() - 0.714).abs() < 1e-3);
}

#[test]
fn running_cost_terms() {
    let sys = toy_cascade();
    let state = [0.5, 0.5, 0.5];
    let mut c = ExtendedControl::zeros(&sys);
    c.turbine = vec![0.7, 0.2];
    c.ffs[0] = 0.4;
    c.virtuals[0] = 0.5;
    let zero = MultiplierSet::for_system(&sys, 4.0, 1, &[0.0]);
    let primal = instantaneous_cost(&sys.spec, &c, &state).unwrap();
    assert_eq!(running_cost(&sys, 2.0, &state, &c, &zero).unwrap(), primal);

    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[-1.68e-4]);
    let at = DamAtState::new(&sys.spec.dams[0], 0.5).unwrap();
    let h = at.outflow(0.7, 0.0);
    // before τ = 1 h only the release term is present, and with λ < 0 it adds cost
    let early = running_cost(&sys, 0.5, &state, &c, &lam).unwrap();
    assert!((early - (primal + 1.68e-4 * h)).abs() < 1e-9);
    let late = running_cost(&sys, 2.0, &state, &c, &lam).unwrap();
    let psi = 100.0 * 3600.0;
    assert!((late - (primal - 1.68e-4 * psi * 0.5 + 1.68e-4 * h)).abs() < 1e-9);
    // after T - τ the release term drops
    let end = running_cost(&sys, 3.5, &state, &c, &lam).unwrap();
    assert!((end - (primal - 1.68e-4 * psi * 0.5)).abs() < 1e-9);
}

#[test]
fn negative_release_multiplier_rewards_upstream_release() {
    let sys = toy_cascade();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[-1.68e-4]);
    let pos = MultiplierSet::for_system(&sys, 4.0, 1, &[1.68e-4]);
    let state = [0.5, 0.5, 0.5];
    let mut c = ExtendedControl::zeros(&sys);
    c.spill[0] = 1.0;
    let a = running_cost(&sys, 0.5, &state, &c, &lam).unwrap();
    let b = running_cost(&sys, 0.5, &state, &c, &pos).unwrap();
    assert!(b < a);
}

#[test]
fn idle_system_has_zero_hamiltonian() {
    let sys = toy_cascade();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[0.0]);
    let step = step_at(&sys, &lam, 2.0, 0.0, 0.0);
    let (c, v) = minimize_hamiltonian(&sys, &step, &[0.5, 0.5, 0.5], Gradient::Linear(&[0.0; 3]), BoundaryRule::Node).unwrap();
    assert!(v.abs() < 1e-9);
    assert!(c.turbine.iter().chain(&c.spill).chain(&c.ffs).all(|&x| x.abs() < 1e-12));
    assert!(c.battery.abs() < 1e-12);
}

#[test]
fn virtual_control_is_bang_bang() {
    let sys = toy_cascade();
    let psi = 100.0 * 3600.0;
    let range = 2e6;
    for (lam1, g_down, want) in [(1e-4, 0.0, 0.0), (-1e-4, 0.0, 1.0), (1e-4, -1000.0, 1.0), (-1e-4, 1000.0, 0.0)] {
        let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[lam1]);
        let step = step_at(&sys, &lam, 2.0, 2e4, 30.0);
        let reduced = psi * (g_down / range + lam1);
        assert_eq!(reduced < 0.0, want == 1.0);
        let g = [0.0, g_down, 0.0];
        let (c, _) = minimize_hamiltonian(&sys, &step, &[0.5, 0.5, 0.5], Gradient::Linear(&g), BoundaryRule::Node).unwrap();
        assert_eq!(c.virtuals[0], want, "λ {lam1}, g {g_down}");
    }
}

#[test]
fn virtual_control_is_off_before_the_delay() {
    let sys = toy_cascade();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[-1.0]);
    let step = step_at(&sys, &lam, 0.5, 2e4, 30.0);
    let (c, _) = minimize_hamiltonian(&sys, &step, &[0.5, 0.5, 0.5], Gradient::Linear(&[0.0; 3]), BoundaryRule::Node).unwrap();
    assert_eq!(c.virtuals[0], 0.0);
}

#[test]
fn hydro_first_when_it_is_cheapest() {
    let sys = toy_single();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[]);
    let s = power_coefficient(&sys.spec.dams[0], 0.5).unwrap();
    let step = step_at(&sys, &lam, 0.0, s, 0.0);
    // charge valued between water and fuel: neither discharging nor charging pays
    let g = [0.0, -1e3];
    let (c, v) = minimize_hamiltonian(&sys, &step, &[0.5, 0.5], Gradient::Linear(&g), BoundaryRule::Node).unwrap();
    assert!((c.turbine[0] - 1.0).abs() < 1e-9, "{c:?}");
    assert!(c.battery.abs() < 1e-9 && c.ffs[0].abs() < 1e-9);
    assert!(c.spill[0].abs() < 1e-12);
    let lat = lattice_hamiltonian(&sys, &step, &[0.5, 0.5], &g, 21);
    assert!((v - lat.value).abs() <= lat.resolution + 1e-9 * v.abs());
}

#[test]
fn demand_beyond_capacity_is_infeasible() {
    let sys = toy_single();
    let lam = MultiplierSet::for_system(&sys, 4.0, 1, &[]);
    let step = step_at(&sys, &lam, 1.25, 1e6, 0.0);
    let err = minimize_hamiltonian(&sys, &step, &[0.5, 0.5], Gradient::Linear(&[0.0, 0.0]), BoundaryRule::Node).unwrap_err();
    match err {
        Error::Infeasible { t_hours, shortfall_kw, .. } => {
            assert_eq!(t_hours, 1.25);
            assert!(shortfall_kw > 0.0);
        }
        e => panic!("{e}"),
    }
}

#[test]
fn lp_matches_lattice_search_on_random_states() {
    let sys = toy_cascade();
    let series = toy_series(&sys, 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..30 {
        let lam = MultiplierSet::for_system(&sys, 4.0, 2, &[0.0]).with_flat(&[rng.gen_range(-5e-4..5e-4), rng.gen_range(-5e-4..5e-4)]);
        let t = rng.gen_range(0..16) as f64 * 0.25;
        let step = StepData::build(&sys, &series, &lam, t, 0.25).unwrap();
        let mut state: Vec<f64> = (0..2).map(|_| rng.gen_range(0.05..0.95)).collect();
        state.push([0.0, 0.4, 1.0][case % 3]);
        let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-2e3..2e3)).collect();
        let (_, v) = minimize_hamiltonian(&sys, &step, &state, Gradient::Linear(&g), BoundaryRule::Node).unwrap();
        let lat = lattice_hamiltonian(&sys, &step, &state, &g, 51);
        let scale = 1e-9 * lat.value.abs().max(1.0);
        assert!(v <= lat.value + scale, "case {case}: lp {v} above lattice {}", lat.value);
        assert!(lat.value - v <= lat.resolution + scale, "case {case}: gap {} > {}", lat.value - v, lat.resolution);
    }
}

proptest! {
    #[test]
    fn running_cost_is_affine_in_multipliers(a in -1e-3f64..1e-3, b in -1e-3f64..1e-3, w in 0.0f64..1.0, t in 0.0f64..4.0) {
        let sys = toy_cascade();
        let state = [0.3, 0.6, 0.5];
        let mut c = ExtendedControl::zeros(&sys);
        c.turbine = vec![0.4, 0.9];
        c.spill = vec![0.1, 0.0];
        c.virtuals[0] = 0.7;
        let la = MultiplierSet::for_system(&sys, 4.0, 1, &[a]);
        let lb = MultiplierSet::for_system(&sys, 4.0, 1, &[b]);
        let lm = MultiplierSet::for_system(&sys, 4.0, 1, &[w * a + (1.0 - w) * b]);
        let ra = running_cost(&sys, t, &state, &c, &la).unwrap();
        let rb = running_cost(&sys, t, &state, &c, &lb).unwrap();
        let rm = running_cost(&sys, t, &state, &c, &lm).unwrap();
        prop_assert!((rm - (w * ra + (1.0 - w) * rb)).abs() <= 1e-9 * ra.abs().max(rb.abs()).max(1.0));
    }
}

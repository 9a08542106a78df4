mod common;

use cascade_dispatch::hjb::{solve_hjb, Grid, ValueField};
use cascade_dispatch::relaxation::MultiplierSet;
use cascade_dispatch::simulate::*;
use cascade_dispatch::system::*;
use cascade_dispatch::Error;

use common::{toy_cascade, toy_series, toy_single};

struct Case {
    sys: System,
    series: Series,
    lambda: MultiplierSet,
    field: ValueField,
    x0: Vec<f64>,
}

impl Case {
    fn ctx(&self) -> ForwardContext<'_> {
        ForwardContext::new(&self.sys, &self.field, &self.lambda, &self.series, &self.x0).unwrap()
    }
}

fn case(sys: System, lambda: &[f64], x0: Vec<f64>) -> Case {
    let horizon = 4.0;
    let series = toy_series(&sys, horizon);
    let lambda = MultiplierSet::for_system(&sys, horizon, 2, lambda);
    let grid = Grid::uniform(horizon, 0.25, 0.25, sys.n_states()).unwrap();
    let field = solve_hjb(&sys, &grid, &lambda, &series).unwrap();
    Case {
        sys,
        series,
        lambda,
        field,
        x0,
    }
}

fn single() -> Case {
    case(toy_single(), &[], vec![0.6, 0.9])
}

fn cascade() -> Case {
    case(toy_cascade(), &[-3e-4, 2e-4], vec![0.7, 0.4, 0.8])
}

fn check_balances(sys: &System, traj: &Trajectory) {
    let nd = sys.n_dams();
    for (n, rec) in traj.steps.iter().enumerate() {
        let next = traj.state_at(n + 1);
        for i in 0..nd {
            let r = sys.spec.dams[i].volume_range();
            let want = rec.state[i] + traj.dt * (rec.inflow[i] + rec.arrivals[i] - rec.outflow[i]) / r;
            assert!((next[i] - want).abs() <= 1e-10, "water, step {n} dam {i}: {} vs {want}", next[i]);
        }
        let supply: f64 = rec.hydro_power.iter().sum::<f64>() + rec.ffs_power.iter().sum::<f64>() + rec.battery_power;
        assert!(
            (supply - rec.demand).abs() <= 1e-6 * rec.demand.max(1.0),
            "power, step {n}: {supply} vs {}",
            rec.demand
        );
    }
}

#[test]
fn no_links_means_no_subgradient_and_primal_theta() {
    let c = single();
    let ctx = c.ctx();
    let d = ctx.relaxed().unwrap();
    assert!(d.flat_subgradient().is_empty());
    assert!((d.theta - d.trajectory.primal_cost).abs() <= 1e-9 * d.theta.abs());
    let adm = ctx.admissible().unwrap();
    assert_eq!(adm.steps.len(), d.trajectory.steps.len());
    for (a, r) in adm.steps.iter().zip(&d.trajectory.steps) {
        assert_eq!(a.control.turbine, r.control.turbine);
        assert_eq!(a.control.battery, r.control.battery);
    }
    assert_eq!(adm.primal_cost, d.trajectory.primal_cost);
}

#[test]
fn admissible_arrivals_are_delayed_outflows() {
    let c = cascade();
    let adm = c.ctx().admissible().unwrap();
    // one hour at a quarter-hour step
    let delay = 4;
    for (n, rec) in adm.steps.iter().enumerate() {
        assert_eq!(rec.arrivals[0], 0.0);
        let want = if n >= delay { adm.steps[n - delay].outflow[0] } else { 0.0 };
        assert_eq!(rec.arrivals[1], want, "step {n}");
        assert!(rec.control.virtuals.is_empty());
    }
}

#[test]
fn relaxed_arrivals_are_virtual() {
    let c = cascade();
    let d = c.ctx().relaxed().unwrap();
    let psi = c.sys.spec.dams[0].phi_max * SECONDS_PER_HOUR;
    for rec in &d.trajectory.steps {
        assert!((rec.arrivals[1] - psi * rec.control.virtuals[0]).abs() <= 1e-9 * psi);
        if rec.t < 1.0 {
            assert_eq!(rec.control.virtuals[0], 0.0, "virtual release before the delay at {}", rec.t);
        }
    }
}

#[test]
fn subgradient_is_virtual_minus_delayed_release() {
    let c = cascade();
    let d = c.ctx().relaxed().unwrap();
    let (tau, horizon) = (1.0, 4.0);
    let dt = d.trajectory.dt;
    let mut virt = 0.0;
    let mut real = 0.0;
    for rec in &d.trajectory.steps {
        if rec.t >= tau {
            virt += rec.arrivals[1] * dt;
        }
        if rec.t + tau < horizon {
            real += rec.outflow[0] * dt;
        }
    }
    let total: f64 = d.flat_subgradient().iter().sum();
    assert!((total - (virt - real)).abs() <= 1e-9 * (virt + real), "{total} vs {}", virt - real);
    assert_eq!(d.subgradient.len(), 1);
    assert_eq!(d.subgradient[0].len(), 2);
}

#[test]
fn theta_integrates_the_lagrangian_rate() {
    let c = cascade();
    let d = c.ctx().relaxed().unwrap();
    let sum: f64 = d.trajectory.steps.iter().map(|r| r.lagrangian_rate * d.trajectory.dt).sum();
    assert_eq!(d.theta, sum);
    assert_eq!(primal_cost(&d.trajectory), d.trajectory.primal_cost);
}

#[test]
fn paths_satisfy_balances() {
    for c in [single(), cascade()] {
        let ctx = c.ctx();
        let adm = ctx.admissible().unwrap();
        check_balances(&c.sys, &adm);
        let sm = ctx
            .smoothed(Beta {
                turbine: 1.0,
                spill: 10.0,
                battery: 1e4,
            })
            .unwrap();
        check_balances(&c.sys, &sm);
        for t in [&adm, &sm] {
            assert!(t.max_clamp <= 0.5 * 0.25, "clamped by {}", t.max_clamp);
            for n in 0..=t.steps.len() {
                assert!(t.state_at(n).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

#[test]
fn zero_weights_reproduce_the_admissible_path() {
    let c = cascade();
    let ctx = c.ctx();
    let adm = ctx.admissible().unwrap();
    let sm = ctx.smoothed(Beta::ZERO).unwrap();
    assert_eq!(sm.kind, PathKind::Smoothed);
    assert_eq!(sm.steps, adm.steps);
    assert_eq!(sm.primal_cost, adm.primal_cost);
}

#[test]
fn heavy_battery_weight_flattens_the_battery() {
    // cheap first half, expensive second half: the unweighted battery cycles
    let sys = toy_single();
    let series = Series {
        demand: TimeSeries::new(vec![(0.0, 5e3), (1.99, 5e3), (2.0, 3e4), (4.0, 3e4)]).unwrap(),
        inflows: vec![TimeSeries::constant(30.0 * SECONDS_PER_HOUR, 4.0)],
    };
    let lambda = MultiplierSet::for_system(&sys, 4.0, 2, &[]);
    let grid = Grid::uniform(4.0, 0.25, 0.25, 2).unwrap();
    let field = solve_hjb(&sys, &grid, &lambda, &series).unwrap();
    let ctx = ForwardContext::new(&sys, &field, &lambda, &series, &[0.6, 0.9]).unwrap();
    let adm = ctx.admissible().unwrap();
    let heavy = ctx.smoothed(Beta::ZERO.with(Group::Battery, 1e12)).unwrap();
    assert!(
        heavy.variation.battery <= 0.1 * adm.variation.battery,
        "{} vs {}",
        heavy.variation.battery,
        adm.variation.battery
    );
    // apart from the stop at the full face the profile is constant
    for w in heavy.steps[2..].windows(2) {
        assert!((w[1].battery_power - w[0].battery_power).abs() < 1.0, "{} -> {}", w[0].battery_power, w[1].battery_power);
    }
    check_balances(&sys, &heavy);
}

#[test]
fn negative_weights_are_rejected() {
    let c = single();
    let err = c.ctx().smoothed(Beta::ZERO.with(Group::Spill, -1.0)).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)), "{err}");
}

#[test]
fn replay_is_deterministic() {
    let a = cascade();
    let b = cascade();
    assert_eq!(a.ctx().relaxed().unwrap(), b.ctx().relaxed().unwrap());
    assert_eq!(a.ctx().admissible().unwrap(), b.ctx().admissible().unwrap());
}

#[test]
fn trajectory_csv_has_one_row_per_step() {
    let c = cascade();
    let adm = c.ctx().admissible().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_trajectory_csv(&c.sys, &adm, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    let header = trajectory_header(&c.sys, PathKind::Admissible);
    assert_eq!(rows[0].split(',').count(), header.len());
    // header, one row per step, terminal state
    assert_eq!(rows.len(), adm.steps.len() + 2);
    for r in &rows[1..] {
        assert_eq!(r.split(',').count(), header.len());
    }
    let last: Vec<&str> = rows.last().unwrap().split(',').collect();
    assert_eq!(last[0].parse::<f64>().unwrap(), 4.0);
    for (k, v) in adm.final_state.iter().enumerate() {
        assert_eq!(last[1 + k].parse::<f64>().unwrap(), *v);
    }
    assert!(last[1 + adm.final_state.len()..].iter().all(|c| c.is_empty()));
}

#[test]
fn one_smoothed_step_is_monotone_in_its_weight() {
    use rand::{Rng, SeedableRng};
    // two steps: the first is never penalized, so the variation is that of
    // the single smoothed step
    let sys = toy_cascade();
    let horizon = 0.5;
    let grid = Grid::uniform(horizon, 0.25, 0.25, 3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let sweep = cascade_dispatch::orchestrator::default_beta_sweep();
    for _ in 0..20 {
        let d0 = rng.gen_range(5e3..2.5e4);
        let d1 = rng.gen_range(5e3..2.5e4);
        let series = Series {
            demand: TimeSeries::new(vec![(0.0, d0), (0.25, d1), (0.5, d1)]).unwrap(),
            inflows: vec![TimeSeries::constant(30.0 * SECONDS_PER_HOUR, horizon); 2],
        };
        let lambda = MultiplierSet::for_system(&sys, horizon, 1, &[rng.gen_range(-1e-3..1e-3)]);
        let field = solve_hjb(&sys, &grid, &lambda, &series).unwrap();
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.8)).collect();
        let ctx = ForwardContext::new(&sys, &field, &lambda, &series, &x0).unwrap();
        for g in Group::ALL {
            let v: Vec<f64> = sweep.iter().map(|&b| ctx.smoothed(Beta::ZERO.with(g, b)).unwrap().variation.get(g)).collect();
            for w in v.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{g:?}: {v:?}");
            }
        }
    }
}

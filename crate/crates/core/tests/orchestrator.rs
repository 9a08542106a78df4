mod common;

use cascade_dispatch::orchestrator::*;
use cascade_dispatch::simulate::{Beta, Group};
use cascade_dispatch::system::*;
use cascade_dispatch::Error;

use common::{toy_cascade, toy_series, toy_single};

fn quick(sys: &System) -> RunOptions {
    RunOptions {
        n_iter: 12,
        max_levels: 2,
        min_levels: 2,
        ..RunOptions::new(sys)
    }
}

#[test]
fn no_cascade_needs_one_level_and_one_call() {
    let sys = toy_single();
    let series = toy_series(&sys, 4.0);
    let out = run_algorithm(&sys, &series, &[0.6, 0.9], 4.0, &quick(&sys)).unwrap();
    assert_eq!(out.levels.len(), 1);
    assert_eq!(out.levels[0].evals, 1);
    assert!(out.relaxed.flat_subgradient().is_empty());
    // without links the relaxed path is admissible
    assert_eq!(out.relaxed.theta, out.admissible.primal_cost);
    let fine = RunOptions {
        dt: 0.125,
        dx: vec![0.125; 2],
        ..quick(&sys)
    };
    let refined = run_algorithm(&sys, &series, &[0.6, 0.9], 4.0, &fine).unwrap();
    assert!(
        refined.report.error_iii < out.report.error_iii,
        "{} vs {}",
        refined.report.error_iii,
        out.report.error_iii
    );
}

#[test]
fn cascade_run_improves_the_dual_and_keeps_weak_duality() {
    let sys = toy_cascade();
    let series = toy_series(&sys, 4.0);
    let x0 = [0.7, 0.4, 0.8];
    let opts = RunOptions {
        dt: 0.125,
        dx: vec![0.125; 3],
        ..quick(&sys)
    };
    let out = run_algorithm(&sys, &series, &x0, 4.0, &opts).unwrap();
    assert_eq!(out.levels.len(), 2);
    let (l1, l2) = (&out.levels[0].gap, &out.levels[1].gap);
    assert!(l2.theta >= l1.theta, "{} < {}", l2.theta, l1.theta);
    for g in [l1, l2] {
        assert!(g.theta <= g.admissible_cost, "{} > {}", g.theta, g.admissible_cost);
        assert!(g.theta <= g.smoothed_cost, "{} > {}", g.theta, g.smoothed_cost);
    }
    assert_eq!(out.lambda.segments(0), 2);
    assert_eq!(out.report, out.levels[1].gap);
}

#[test]
fn reference_fills_the_discretization_terms() {
    let sys = toy_cascade();
    let series = toy_series(&sys, 4.0);
    let opts = RunOptions {
        n_iter: 6,
        max_levels: 1,
        reference: true,
        ..RunOptions::new(&sys)
    };
    let out = run_algorithm(&sys, &series, &[0.7, 0.4, 0.8], 4.0, &opts).unwrap();
    let r = &out.report;
    let (e1, e4) = (r.error_i.unwrap(), r.error_iv.unwrap());
    assert!(e1.is_finite() && e4.is_finite());
    assert!((r.total - (r.error_ii + r.error_iii + e1 + e4)).abs() < 1e-15);
}

fn quantities(theta: f64, grid_value: f64, adm: f64, sm: f64) -> RunQuantities {
    RunQuantities {
        theta,
        grid_value,
        admissible_cost: adm,
        smoothed_cost: sm,
    }
}

#[test]
fn self_reference_has_no_discretization_error() {
    let q = quantities(100.0, 101.0, 105.0, 103.0);
    let r = error_decomposition(2, Beta::ZERO, 0.02, &q, Some(&q));
    assert_eq!(r.error_i, Some(0.0));
    assert_eq!(r.error_iv, Some(0.0));
    assert!((r.error_ii - 0.03).abs() < 1e-15);
    assert!((r.error_iii - 0.01).abs() < 1e-15);
    assert!(!r.tolerance_met);
}

#[test]
fn matching_dual_has_no_duality_gap() {
    let q = quantities(250.0, 250.0, 260.0, 250.0);
    let r = error_decomposition(1, Beta::ZERO, 0.02, &q, None);
    assert_eq!(r.error_ii, 0.0);
    assert_eq!(r.error_iii, 0.0);
    assert_eq!(r.error_i, None);
    assert!(r.tolerance_met);
    assert_eq!(r.total, 0.0);
}

#[test]
fn tolerance_is_on_the_duality_gap() {
    let just = quantities(100.0, 90.0, 200.0, 102.0);
    assert!(error_decomposition(1, Beta::ZERO, 0.02, &just, None).tolerance_met);
    let over = quantities(100.0, 100.0, 100.0, 102.5);
    assert!(!error_decomposition(1, Beta::ZERO, 0.02, &over, None).tolerance_met);
}

#[test]
fn options_are_validated() {
    let sys = toy_cascade();
    let mut o = RunOptions::new(&sys);
    o.tol = 1.5;
    o.lambda0 = vec![];
    o.beta_sweep = vec![0.0, 1.0, 1.0];
    match o.validate(&sys).unwrap_err() {
        Error::Validation(d) => assert_eq!(d.len(), 3, "{d:?}"),
        e => panic!("{e}"),
    }
    assert!(RunOptions::new(&sys).validate(&sys).is_ok());
}

#[test]
fn infeasible_demand_stops_the_run() {
    let sys = toy_cascade();
    let series = Series {
        demand: TimeSeries::constant(1e7, 4.0),
        inflows: vec![TimeSeries::constant(0.0, 4.0); 2],
    };
    let err = run_algorithm(&sys, &series, &[0.5, 0.5, 0.5], 4.0, &quick(&sys)).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }), "{err}");
}

#[test]
fn sequential_tuning_keeps_earlier_choices() {
    let sys = toy_cascade();
    let series = toy_series(&sys, 4.0);
    let opts = RunOptions {
        n_iter: 4,
        max_levels: 1,
        ..RunOptions::new(&sys)
    };
    let out = run_algorithm(&sys, &series, &[0.7, 0.4, 0.8], 4.0, &opts).unwrap();
    let sweeps = &out.levels[0].sweeps;
    let groups: Vec<Group> = sweeps.iter().map(|s| s.group).collect();
    assert_eq!(groups, Group::ALL.to_vec());
    let beta = out.report.beta;
    for s in sweeps {
        assert_eq!(beta.get(s.group), s.selected);
        assert_eq!(s.points.len(), default_beta_sweep().len());
    }
    assert_eq!(out.smoothed.beta, beta);
}

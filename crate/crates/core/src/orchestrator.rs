//! Refinement loop: dual maximization per multiplier level, smoothing weight
//! selection, and the duality-gap report.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hjb::{Grid, HjbOptions, HjbSolver, ValueField, DEFAULT_COURANT_MARGIN};
use crate::lmbm::{self, HistoryRow, LmbmOptions, Termination};
use crate::relaxation::MultiplierSet;
use crate::simulate::{Beta, DualEval, ForwardContext, Group, Trajectory};
use crate::system::{Series, System};

/// `{0} ∪ 10^{-2..6}`
pub fn default_beta_sweep() -> Vec<f64> {
    std::iter::once(0.0).chain((-2..=6).map(|k| 10f64.powi(k))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOptions {
    pub tol: f64,
    /// Oracle calls per level.
    pub n_iter: usize,
    pub min_levels: u32,
    pub max_levels: u32,
    pub dt: f64,
    pub dx: Vec<f64>,
    pub margin: f64,
    /// Level-1 multiplier per link, USD/m³.
    pub lambda0: Vec<f64>,
    /// Typical multiplier magnitude, used to scale the dual variables.
    pub lambda_scale: f64,
    /// `|α| <= lambda_bound`, USD/m³
    pub lambda_bound: f64,
    pub lmbm_epsilon: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub beta_sweep: Vec<f64>,
    /// Slope threshold of the L-curve rule, USD per variation unit.
    pub beta_epsilon: f64,
    /// Groups whose weight is tuned; others keep `beta0`.
    pub tune: Vec<Group>,
    pub beta0: Beta,
    /// Also solve on the grid with `dt` and `dx` halved to estimate the
    /// discretization terms of the gap bound.
    pub reference: bool,
}

impl RunOptions {
    pub fn new(sys: &System) -> Self {
        RunOptions {
            tol: 0.02,
            n_iter: 30,
            min_levels: 1,
            max_levels: 6,
            dt: 0.25,
            dx: vec![0.25; sys.n_states()],
            margin: DEFAULT_COURANT_MARGIN,
            lambda0: vec![1e-4; sys.topology.links.len()],
            lambda_scale: 1e-4,
            lambda_bound: 1.0,
            lmbm_epsilon: 1e-3,
            initial_step: 1.0,
            max_step: 10.0,
            beta_sweep: default_beta_sweep(),
            beta_epsilon: 10.0,
            tune: Group::ALL.to_vec(),
            beta0: Beta::ZERO,
            reference: false,
        }
    }

    pub fn validate(&self, sys: &System) -> Result<()> {
        let mut d = Vec::new();
        if !(self.tol > 0.0 && self.tol < 1.0) {
            d.push(format!("tol = {} must lie in (0, 1)", self.tol));
        }
        if self.n_iter == 0 {
            d.push("n_iter must be positive".into());
        }
        if self.max_levels == 0 || self.min_levels > self.max_levels {
            d.push("need 1 <= min_levels <= max_levels".into());
        }
        if self.max_levels > 20 {
            d.push("max_levels above 20".into());
        }
        if self.lambda0.len() != sys.topology.links.len() {
            d.push(format!(
                "lambda0 has {} entries, the cascade has {} links",
                self.lambda0.len(),
                sys.topology.links.len()
            ));
        }
        if !(self.lambda_scale > 0.0) || !(self.lambda_bound > 0.0) {
            d.push("lambda_scale and lambda_bound must be positive".into());
        }
        if self.beta_sweep.windows(2).any(|w| !(w[1] > w[0])) || self.beta_sweep.iter().any(|b| !(*b >= 0.0)) {
            d.push("beta sweep must be nonnegative and strictly increasing".into());
        }
        if !(self.beta_epsilon > 0.0) {
            d.push("beta epsilon must be positive".into());
        }
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(d))
        }
    }
}

/// One point of the L-curve sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub beta: f64,
    /// USD
    pub cost: f64,
    pub variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BetaSweep {
    pub group: Group,
    pub points: Vec<SweepPoint>,
    /// `|ΔC/ΔV|` between consecutive points.
    pub slopes: Vec<f64>,
    pub selected: f64,
    /// Sweep indices where variation increased or cost decreased by more
    /// than the solver tolerance.
    pub violations: Vec<usize>,
    pub warning: Option<String>,
}

/// Relative change allowed before a sweep step counts as non-monotone.
pub const SWEEP_TOLERANCE: f64 = 1e-6;

/// Picks the largest sweep weight reached while every forward-difference
/// slope so far stays below `epsilon`.
pub fn select_beta(group: Group, points: Vec<SweepPoint>, epsilon: f64) -> BetaSweep {
    let mut slopes = Vec::new();
    let mut violations = Vec::new();
    for (k, w) in points.windows(2).enumerate() {
        let dc = w[1].cost - w[0].cost;
        let dv = w[0].variation - w[1].variation;
        let cscale = w[0].cost.abs().max(1.0);
        let vscale = w[0].variation.abs().max(1e-300);
        if dc < -SWEEP_TOLERANCE * cscale || dv < -SWEEP_TOLERANCE * vscale {
            violations.push(k + 1);
        }
        slopes.push(if dv > 0.0 {
            (dc / dv).abs()
        } else if dc.abs() <= SWEEP_TOLERANCE * cscale {
            0.0
        } else {
            f64::INFINITY
        });
    }
    let mut warning = None;
    let selected;
    if points.first().is_some_and(|p| p.variation <= 0.0) {
        warning = Some(format!("{} controls already flat; weight left at zero", group.name()));
        selected = 0.0;
    } else {
        let mut k = 0;
        while k < slopes.len() && slopes[k] < epsilon {
            k += 1;
        }
        if k == 0 {
            warning = Some(format!("every {} slope is at least {epsilon}; weight set to zero", group.name()));
            selected = 0.0;
        } else {
            // slopes[k-1] < ε: leaving points[k-1] is still cheap
            selected = points[k - 1].beta;
        }
    }
    BetaSweep {
        group,
        points,
        slopes,
        selected,
        violations,
        warning,
    }
}

/// L-curve weight for one group with the other weights held at `current`.
pub fn tune_beta(ctx: &ForwardContext, group: Group, current: Beta, epsilon: f64, sweep: &[f64]) -> Result<BetaSweep> {
    let runs: Vec<Result<SweepPoint>> = sweep
        .par_iter()
        .map(|&b| {
            let t = ctx.smoothed(current.with(group, b))?;
            Ok(SweepPoint {
                beta: b,
                cost: t.primal_cost,
                variation: t.variation.get(group),
            })
        })
        .collect();
    let points = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(select_beta(group, points, epsilon))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub level: u32,
    pub beta: Beta,
    /// USD
    pub theta: f64,
    /// `u(0, X₀)` on the grid, USD
    pub grid_value: f64,
    pub admissible_cost: f64,
    pub smoothed_cost: f64,
    pub error_i: Option<f64>,
    pub error_ii: f64,
    pub error_iii: f64,
    pub error_iv: Option<f64>,
    /// Sum of the available terms.
    pub total: f64,
    pub tol: f64,
    pub tolerance_met: bool,
}

/// Quantities of one solved configuration entering the gap bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunQuantities {
    pub theta: f64,
    pub grid_value: f64,
    pub admissible_cost: f64,
    pub smoothed_cost: f64,
}

pub fn error_decomposition(level: u32, beta: Beta, tol: f64, run: &RunQuantities, reference: Option<&RunQuantities>) -> GapReport {
    let th = run.theta.abs();
    let error_ii = (run.smoothed_cost - run.theta).abs() / th;
    let error_iii = (run.theta - run.grid_value).abs() / th;
    let error_i = reference.map(|r| (r.smoothed_cost - run.smoothed_cost).abs() / th);
    let error_iv = reference.map(|r| (run.grid_value - r.grid_value).abs() / th);
    let total = error_ii + error_iii + error_i.unwrap_or(0.0) + error_iv.unwrap_or(0.0);
    GapReport {
        level,
        beta,
        theta: run.theta,
        grid_value: run.grid_value,
        admissible_cost: run.admissible_cost,
        smoothed_cost: run.smoothed_cost,
        error_i,
        error_ii,
        error_iii,
        error_iv,
        total,
        tol,
        tolerance_met: error_ii <= tol,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: u32,
    pub lambda: MultiplierSet,
    pub evals: usize,
    pub termination: Termination,
    pub lambda_bound_hit: bool,
    pub sweeps: Vec<BetaSweep>,
    pub gap: GapReport,
    #[serde(skip)]
    pub history: Vec<HistoryRow>,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub levels: Vec<LevelReport>,
    pub report: GapReport,
    pub lambda: MultiplierSet,
    pub field: ValueField,
    pub relaxed: DualEval,
    pub admissible: Trajectory,
    pub smoothed: Trajectory,
    pub grid: Grid,
}

impl RunOutcome {
    pub fn tolerance_met(&self) -> bool {
        self.report.tolerance_met
    }
}

/// HJB solve plus relaxed path for one multiplier.
pub struct DualOracle<'a> {
    pub sys: &'a System,
    pub grid: &'a Grid,
    pub series: &'a Series,
    pub x0: &'a [f64],
    pub opts: HjbOptions,
}

impl DualOracle<'_> {
    pub fn solve(&self, lambda: &MultiplierSet) -> Result<(ValueField, DualEval)> {
        let field = HjbSolver::new(self.sys, self.grid, lambda, self.series, &self.opts)?.solve()?;
        let eval = ForwardContext::new(self.sys, &field, lambda, self.series, self.x0)?.relaxed()?;
        Ok((field, eval))
    }
}

/// Primal reconstruction at a fixed multiplier: admissible path, weight
/// tuning and the smoothed path.
pub struct Reconstruction {
    pub admissible: Trajectory,
    pub smoothed: Trajectory,
    pub beta: Beta,
    pub sweeps: Vec<BetaSweep>,
}

pub fn reconstruct(ctx: &ForwardContext, opts: &RunOptions, start: Beta) -> Result<Reconstruction> {
    let admissible = ctx.admissible()?;
    let mut beta = start;
    let mut sweeps = Vec::new();
    for &g in &opts.tune {
        let s = tune_beta(ctx, g, beta, opts.beta_epsilon, &opts.beta_sweep)?;
        beta = beta.with(g, s.selected);
        sweeps.push(s);
    }
    let smoothed = ctx.smoothed(beta)?;
    Ok(Reconstruction {
        admissible,
        smoothed,
        beta,
        sweeps,
    })
}

/// Full refinement loop from `x0`.
pub fn run_algorithm(sys: &System, series: &Series, x0: &[f64], horizon: f64, opts: &RunOptions) -> Result<RunOutcome> {
    opts.validate(sys)?;
    let grid = Grid::new(horizon, opts.dt, opts.dx.clone())?;
    let hjb_opts = HjbOptions { margin: opts.margin };
    let oracle = DualOracle {
        sys,
        grid: &grid,
        series,
        x0,
        opts: hjb_opts.clone(),
    };
    let mut lambda = MultiplierSet::for_system(sys, horizon, 1, &opts.lambda0);
    let mut beta = opts.beta0;
    let mut levels: Vec<LevelReport> = Vec::new();
    let mut last: Option<(MultiplierSet, ValueField, DualEval, Reconstruction)> = None;
    for level in 1..=opts.max_levels {
        if level > 1 {
            lambda = lambda.refine();
        }
        let (best_lambda, field, dual, evals, termination, bound_hit, history) = maximize_dual(&oracle, &lambda, opts)?;
        lambda = best_lambda;
        let ctx = ForwardContext::new(sys, &field, &lambda, series, x0)?;
        let rec = reconstruct(&ctx, opts, beta)?;
        beta = rec.beta;
        let q = RunQuantities {
            theta: dual.theta,
            grid_value: field.value_at(0, x0)?,
            admissible_cost: rec.admissible.primal_cost,
            smoothed_cost: rec.smoothed.primal_cost,
        };
        let gap = error_decomposition(level, beta, opts.tol, &q, None);
        let met = gap.tolerance_met;
        levels.push(LevelReport {
            level,
            lambda: lambda.clone(),
            evals,
            termination,
            lambda_bound_hit: bound_hit,
            sweeps: rec.sweeps.clone(),
            gap,
            history,
        });
        drop(ctx);
        last = Some((lambda.clone(), field, dual, rec));
        if sys.topology.links.is_empty() || (met && level >= opts.min_levels) {
            break;
        }
    }
    let (lambda, field, relaxed, rec) = last.expect("at least one level");
    let top = levels.last().unwrap();
    let q = RunQuantities {
        theta: top.gap.theta,
        grid_value: top.gap.grid_value,
        admissible_cost: top.gap.admissible_cost,
        smoothed_cost: top.gap.smoothed_cost,
    };
    let reference = if opts.reference {
        Some(reference_quantities(sys, series, x0, &grid, &lambda, beta, &hjb_opts)?)
    } else {
        None
    };
    let report = error_decomposition(top.level, beta, opts.tol, &q, reference.as_ref());
    Ok(RunOutcome {
        levels,
        report,
        lambda,
        field,
        relaxed,
        admissible: rec.admissible,
        smoothed: rec.smoothed,
        grid,
    })
}

type DualResult = (MultiplierSet, ValueField, DualEval, usize, Termination, bool, Vec<HistoryRow>);

/// Bundle-method maximization of `θ̃` starting from `lambda`; returns the
/// best multiplier seen together with its field and relaxed path.
pub fn maximize_dual(oracle: &DualOracle, lambda: &MultiplierSet, opts: &RunOptions) -> Result<DualResult> {
    if lambda.dim() == 0 {
        let (field, dual) = oracle.solve(lambda)?;
        return Ok((lambda.clone(), field, dual, 1, Termination::Converged, false, Vec::new()));
    }
    let mut best: Option<(f64, MultiplierSet, ValueField, DualEval)> = None;
    let mut first_error: Option<Error> = None;
    let mut f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lam = lambda.with_flat(x);
        match oracle.solve(&lam) {
            Ok((field, dual)) => {
                let v = -dual.theta;
                let g: Vec<f64> = dual.flat_subgradient().iter().map(|s| -s).collect();
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, lam, field, dual));
                }
                Ok((v, g))
            }
            Err(e) => {
                first_error.get_or_insert(e.clone());
                Err(e)
            }
        }
    };
    let lopts = LmbmOptions {
        max_evals: opts.n_iter,
        epsilon: opts.lmbm_epsilon,
        initial_step: opts.initial_step,
        max_step: opts.max_step,
        scale: vec![opts.lambda_scale; lambda.dim()],
        bound: opts.lambda_bound,
        ..Default::default()
    };
    let res = lmbm::minimize(&lambda.flatten(), &lopts, &mut f);
    let res = match res {
        Ok(r) => r,
        Err(e) => return Err(first_error.unwrap_or(e)),
    };
    let (_, lam, field, dual) = best.expect("a successful oracle call");
    Ok((lam, field, dual, res.evals, res.termination, res.bound_hit, res.history))
}

/// Same multiplier and weights on the grid with `dt` and `dx` halved.
pub fn reference_quantities(
    sys: &System,
    series: &Series,
    x0: &[f64],
    grid: &Grid,
    lambda: &MultiplierSet,
    beta: Beta,
    opts: &HjbOptions,
) -> Result<RunQuantities> {
    let fine = grid.refined()?;
    let oracle = DualOracle {
        sys,
        grid: &fine,
        series,
        x0,
        opts: opts.clone(),
    };
    let (field, dual) = oracle.solve(lambda)?;
    let ctx = ForwardContext::new(sys, &field, lambda, series, x0)?;
    Ok(RunQuantities {
        theta: dual.theta,
        grid_value: field.value_at(0, x0)?,
        admissible_cost: ctx.admissible()?.primal_cost,
        smoothed_cost: ctx.smoothed(beta)?.primal_cost,
    })
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cascade_dispatch::hjb::{cfl_report, CflReport, Grid, HjbOptions, HjbSolver, ValueField};
use cascade_dispatch::lmbm::write_history_csv;
use cascade_dispatch::orchestrator::{
    error_decomposition, reconstruct, reference_quantities, run_algorithm, BetaSweep, GapReport, LevelReport,
    RunOptions, RunQuantities,
};
use cascade_dispatch::relaxation::MultiplierSet;
use cascade_dispatch::simulate::{write_trajectory_csv, Beta, ForwardContext, Group, Trajectory};
use cascade_dispatch::{Error, Result};

use crate::config::{Inputs, RunConfig};

/// Smoothing weights act on variations computed with flows in m³/s, battery
/// power in kW and time in seconds.
pub const BETA_UNITS: &str =
    "turbine and spill: USD/(m^6/s^3); battery: USD/(kW^2/s); variation = sum dt_s * (du/dt_s)^2";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_TOLERANCE: i32 = 3;
pub const EXIT_INPUT: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Numerical { .. } | Error::Oracle(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Multiplier and weights exported by `solve`, read back by the replay
/// commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaFile {
    pub lambda: MultiplierSet,
    pub beta: Beta,
}

impl LambdaFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Files {
    pub dual: PathBuf,
    pub admissible: PathBuf,
    pub smoothed: PathBuf,
    pub history: Vec<PathBuf>,
    pub lambda: PathBuf,
    pub report: PathBuf,
    pub field: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub tolerance_met: bool,
    pub gap: GapReport,
    pub beta_units: &'static str,
    pub options: RunOptions,
    pub grid: Grid,
    pub cfl: CflReport,
    pub levels: Vec<LevelReport>,
    pub files: Files,
}

pub struct SolveSummary {
    pub report: SolveReport,
    pub exit: i32,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn grid_of(inp: &Inputs) -> Result<Grid> {
    Grid::new(inp.horizon, inp.opts.dt, inp.opts.dx.clone())
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveSummary> {
    let inp = cfg.load()?;
    let grid = grid_of(&inp)?;
    let cfl = cfl_report(&inp.sys, &grid, &inp.series, inp.opts.margin)?;
    let outcome = run_algorithm(&inp.sys, &inp.series, &inp.x0, inp.horizon, &inp.opts)?;

    let out = &cfg.out;
    create_dir(out)?;
    let files = Files {
        dual: out.join("trajectory_dual.csv"),
        admissible: out.join("trajectory_admissible.csv"),
        smoothed: out.join("trajectory_smoothed.csv"),
        history: outcome
            .levels
            .iter()
            .map(|l| out.join(format!("history_level{}.csv", l.level)))
            .collect(),
        lambda: out.join("lambda.json"),
        report: out.join("report.json"),
        field: cfg.persist_field.then(|| out.join("field.bin")),
    };
    write_trajectory_csv(&inp.sys, &outcome.relaxed.trajectory, &files.dual)?;
    write_trajectory_csv(&inp.sys, &outcome.admissible, &files.admissible)?;
    write_trajectory_csv(&inp.sys, &outcome.smoothed, &files.smoothed)?;
    for (l, path) in outcome.levels.iter().zip(&files.history) {
        write_history_csv(&l.history, -1.0, "theta", path)?;
    }
    write_json(
        &files.lambda,
        &LambdaFile {
            lambda: outcome.lambda.clone(),
            beta: outcome.report.beta,
        },
    )?;
    if let Some(p) = &files.field {
        outcome.field.write_to(p)?;
    }
    let report = SolveReport {
        tolerance_met: outcome.tolerance_met(),
        gap: outcome.report.clone(),
        beta_units: BETA_UNITS,
        options: inp.opts.clone(),
        grid: outcome.grid.clone(),
        cfl,
        levels: outcome.levels.clone(),
        files,
    };
    write_json(&report.files.report, &report)?;
    let exit = if report.tolerance_met { EXIT_OK } else { EXIT_TOLERANCE };
    Ok(SolveSummary { report, exit })
}

pub fn cmd_cfl(cfg: &RunConfig) -> Result<CflReport> {
    let inp = cfg.load()?;
    let grid = grid_of(&inp)?;
    cfl_report(&inp.sys, &grid, &inp.series, inp.opts.margin)
}

pub fn print_cfl(r: &CflReport) {
    println!("{:<16} {:>14} {:>14}", "dimension", "sup|f| (1/h)", "sup|f|/dx");
    for t in &r.terms {
        println!("{:<16} {:>14.4e} {:>14.4e}", t.name, t.sup_drift, t.per_cell);
    }
    println!("sum            {:.4e} per hour", r.sum);
    println!("dt             {} h", r.dt);
    println!("courant        {:.4} (limit {})", r.courant, r.margin);
    println!("dt_max         {:.4} h", r.dt_max);
}

/// Field from a dump, or solved afresh at `lambda` on the configured grid.
fn field_for(inp: &Inputs, lambda: &MultiplierSet, field: Option<&Path>) -> Result<ValueField> {
    let fld = match field {
        Some(p) => ValueField::read_from(p)?,
        None => {
            let grid = grid_of(inp)?;
            let opts = HjbOptions { margin: inp.opts.margin };
            HjbSolver::new(&inp.sys, &grid, lambda, &inp.series, &opts)?.solve()?
        }
    };
    if (fld.grid.horizon - inp.horizon).abs() > 1e-9 || fld.grid.dims() != inp.sys.n_states() {
        return Err(Error::Mismatch(format!(
            "value field covers {} h in {} dimensions, the run needs {} h in {}",
            fld.grid.horizon,
            fld.grid.dims(),
            inp.horizon,
            inp.sys.n_states()
        )));
    }
    Ok(fld)
}

fn check_lambda(inp: &Inputs, lam: &MultiplierSet) -> Result<()> {
    let links = inp.sys.topology.links.len();
    if lam.n_links() != links || (lam.horizon - inp.horizon).abs() > 1e-9 {
        return Err(Error::Mismatch(format!(
            "multiplier file has {} links over {} h, the system has {links} over {} h",
            lam.n_links(),
            lam.horizon,
            inp.horizon
        )));
    }
    for (l, link) in lam.links.iter().enumerate() {
        if (link.tau - inp.sys.tau(l)).abs() > 1e-9 {
            return Err(Error::Mismatch(format!(
                "link {l}: delay {} h in the multiplier file, {} h in the system",
                link.tau,
                inp.sys.tau(l)
            )));
        }
    }
    Ok(())
}

pub struct Replay {
    pub inputs: Inputs,
    pub saved: LambdaFile,
    pub field: ValueField,
}

impl Replay {
    pub fn load(cfg: &RunConfig, lambda: &Path, field: Option<&Path>) -> Result<Self> {
        let inputs = cfg.load()?;
        let saved = LambdaFile::read(lambda)?;
        check_lambda(&inputs, &saved.lambda)?;
        let field = field_for(&inputs, &saved.lambda, field)?;
        Ok(Replay { inputs, saved, field })
    }

    pub fn context(&self) -> Result<ForwardContext<'_>> {
        let i = &self.inputs;
        ForwardContext::new(&i.sys, &self.field, &self.saved.lambda, &i.series, &i.x0)
    }
}

/// Forward paths at a stored multiplier; one smoothed path per weight set,
/// defaulting to the stored weights.
pub fn cmd_simulate(cfg: &RunConfig, lambda: &Path, field: Option<&Path>, betas: &[Beta]) -> Result<Vec<PathBuf>> {
    let rp = Replay::load(cfg, lambda, field)?;
    let ctx = rp.context()?;
    let sys = &rp.inputs.sys;
    create_dir(&cfg.out)?;
    let mut written = Vec::new();
    let mut emit = |traj: &Trajectory, name: String| -> Result<()> {
        let p = cfg.out.join(name);
        write_trajectory_csv(sys, traj, &p)?;
        written.push(p);
        Ok(())
    };
    emit(&ctx.relaxed()?.trajectory, "trajectory_dual.csv".into())?;
    emit(&ctx.admissible()?, "trajectory_admissible.csv".into())?;
    if betas.is_empty() {
        emit(&ctx.smoothed(rp.saved.beta)?, "trajectory_smoothed.csv".into())?;
    } else {
        for (k, &b) in betas.iter().enumerate() {
            emit(&ctx.smoothed(b)?, format!("trajectory_smoothed_{k}.csv"))?;
        }
    }
    Ok(written)
}

/// L-curve sweeps at a stored multiplier.
pub fn cmd_tune_beta(cfg: &RunConfig, lambda: &Path, field: Option<&Path>, groups: &[Group]) -> Result<Vec<BetaSweep>> {
    let rp = Replay::load(cfg, lambda, field)?;
    let ctx = rp.context()?;
    let mut opts = rp.inputs.opts.clone();
    if !groups.is_empty() {
        opts.tune = groups.to_vec();
    }
    let rec = reconstruct(&ctx, &opts, opts.beta0)?;
    create_dir(&cfg.out)?;
    for s in &rec.sweeps {
        let path = cfg.out.join(format!("lcurve_{}.csv", s.group.name()));
        let mut text = format!("# L-curve of the {} weight; cost in USD, variation as in {BETA_UNITS}\n", s.group.name());
        text.push_str("beta,cost,variation,slope_to_next\n");
        for (k, p) in s.points.iter().enumerate() {
            let slope = s.slopes.get(k).map_or(String::new(), |v| format!("{v:e}"));
            text.push_str(&format!("{:e},{:e},{:e},{slope}\n", p.beta, p.cost, p.variation));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    write_json(&cfg.out.join("sweeps.json"), &rec.sweeps)?;
    Ok(rec.sweeps)
}

/// Gap decomposition at a stored multiplier and weights.
pub fn cmd_errors(cfg: &RunConfig, lambda: &Path, field: Option<&Path>) -> Result<GapReport> {
    let rp = Replay::load(cfg, lambda, field)?;
    let ctx = rp.context()?;
    let i = &rp.inputs;
    let beta = rp.saved.beta;
    let dual = ctx.relaxed()?;
    let q = RunQuantities {
        theta: dual.theta,
        grid_value: rp.field.value_at(0, &i.x0)?,
        admissible_cost: ctx.admissible()?.primal_cost,
        smoothed_cost: ctx.smoothed(beta)?.primal_cost,
    };
    let reference = if cfg.reference {
        let opts = HjbOptions { margin: i.opts.margin };
        Some(reference_quantities(&i.sys, &i.series, &i.x0, &rp.field.grid, &rp.saved.lambda, beta, &opts)?)
    } else {
        None
    };
    let report = error_decomposition(rp.saved.lambda.level, beta, i.opts.tol, &q, reference.as_ref());
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("errors.json"), &report)?;
    Ok(report)
}

pub fn print_gap(g: &GapReport) {
    let pct = |v: f64| format!("{:.4}%", 100.0 * v);
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), pct);
    println!("level            {}", g.level);
    println!("theta            {:.2} USD", g.theta);
    println!("grid value       {:.2} USD", g.grid_value);
    println!("admissible cost  {:.2} USD", g.admissible_cost);
    println!("smoothed cost    {:.2} USD", g.smoothed_cost);
    println!(
        "beta             turbine {:e}, spill {:e}, battery {:e}",
        g.beta.turbine, g.beta.spill, g.beta.battery
    );
    println!("error I          {}", opt(g.error_i));
    println!("error II (gap)   {}", pct(g.error_ii));
    println!("error III        {}", pct(g.error_iii));
    println!("error IV         {}", opt(g.error_iv));
    println!("total            {}", pct(g.total));
    println!("tolerance        {} ({})", pct(g.tol), if g.tolerance_met { "met" } else { "not met" });
}

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cascade_dispatch::simulate::{Beta, Group};
use cascade_dispatch::Error;
use cascade_dispatch_cli::commands::{self, print_cfl, print_gap, EXIT_INPUT};
use cascade_dispatch_cli::RunConfig;

#[derive(Parser)]
#[command(name = "cascade-dispatch", version, about = "Short-term dispatch of a hydro cascade with fossil stations and a battery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full primal-dual run with multiplier refinement.
    Solve(Common),
    /// Courant terms of the grid; no solve.
    Cfl(Common),
    /// Forward paths at a stored multiplier.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        replay: ReplayArgs,
        /// Smoothing weights `turbine,spill,battery`; repeat for a sweep.
        #[arg(long = "beta", value_parser = parse_beta)]
        betas: Vec<Beta>,
    },
    /// L-curve sweeps of the smoothing weights at a stored multiplier.
    TuneBeta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        replay: ReplayArgs,
        /// turbine, spill or battery; repeat to tune several in order.
        #[arg(long = "group", value_parser = parse_group)]
        groups: Vec<Group>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Gap decomposition at a stored multiplier.
    Errors {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        replay: ReplayArgs,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    demand: Option<PathBuf>,
    /// `<dam>=<path>`, repeatable.
    #[arg(long, value_parser = parse_inflow)]
    inflow: Vec<(usize, PathBuf)>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    max_levels: Option<u32>,
    #[arg(long)]
    dt: Option<f64>,
    /// One value, or comma-separated per state dimension.
    #[arg(long, value_delimiter = ',')]
    dx: Option<Vec<f64>>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also solve on the grid with dt and dx halved.
    #[arg(long)]
    reference: bool,
    /// Write the final value field next to the other artifacts.
    #[arg(long)]
    persist_field: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Multiplier file written by `solve`.
    #[arg(long)]
    lambda: PathBuf,
    /// Value-field dump written by `solve --persist-field`; solved afresh when absent.
    #[arg(long)]
    field: Option<PathBuf>,
}

fn parse_inflow(s: &str) -> Result<(usize, PathBuf), String> {
    let (dam, path) = s.split_once('=').ok_or("expected <dam>=<path>")?;
    let dam = dam.trim().parse().map_err(|_| format!("bad dam index `{dam}`"))?;
    Ok((dam, PathBuf::from(path)))
}

fn parse_beta(s: &str) -> Result<Beta, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [turbine, spill, battery] => Ok(Beta { turbine, spill, battery }),
        _ => Err("expected turbine,spill,battery".into()),
    }
}

fn parse_group(s: &str) -> Result<Group, String> {
    Group::ALL
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| format!("unknown group `{s}`"))
}

impl Common {
    fn run_config(&self) -> RunConfig {
        let mut c = RunConfig::new(&self.config);
        c.demand = self.demand.clone();
        c.inflow = self.inflow.iter().cloned().collect::<BTreeMap<_, _>>();
        c.out = self.out.clone();
        c.dt = self.dt;
        c.dx = self.dx.clone();
        c.margin = self.margin;
        c.tol = self.tol;
        c.n_iter = self.n_iter;
        c.max_levels = self.max_levels;
        c.persist_field = self.persist_field;
        c.reference = self.reference;
        c
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.cmd {
        Cmd::Solve(common) => {
            let s = commands::cmd_solve(&common.run_config())?;
            for l in &s.report.levels {
                println!(
                    "level {}: theta {:.2}, smoothed cost {:.2}, gap {:.3}% ({} evals)",
                    l.level,
                    l.gap.theta,
                    l.gap.smoothed_cost,
                    100.0 * l.gap.error_ii,
                    l.evals
                );
            }
            print_gap(&s.report.gap);
            println!("report written to {}", s.report.files.report.display());
            if !s.report.tolerance_met {
                eprintln!("gap above tolerance after {} levels", s.report.levels.len());
            }
            Ok(s.exit)
        }
        Cmd::Cfl(common) => {
            let r = commands::cmd_cfl(&common.run_config())?;
            print_cfl(&r);
            if r.ok() {
                Ok(0)
            } else {
                eprintln!(
                    "warning: dt = {} h exceeds dt_max = {:.4} h for Courant limit {}",
                    r.dt, r.dt_max, r.margin
                );
                Ok(EXIT_INPUT)
            }
        }
        Cmd::Simulate { common, replay, betas } => {
            let files = commands::cmd_simulate(&common.run_config(), &replay.lambda, replay.field.as_deref(), &betas)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Cmd::TuneBeta {
            common,
            replay,
            groups,
            sweep,
            epsilon,
        } => {
            let mut cfg = common.run_config();
            cfg.beta_sweep = sweep;
            cfg.beta_epsilon = epsilon;
            let sweeps = commands::cmd_tune_beta(&cfg, &replay.lambda, replay.field.as_deref(), &groups)?;
            for s in sweeps {
                println!("{}: selected {:e}", s.group.name(), s.selected);
                for p in &s.points {
                    println!("  beta {:>8.1e}  cost {:>14.2}  variation {:.4e}", p.beta, p.cost, p.variation);
                }
                if let Some(w) = &s.warning {
                    eprintln!("warning: {w}");
                }
                if !s.violations.is_empty() {
                    eprintln!("warning: non-monotone sweep at indices {:?}", s.violations);
                }
            }
            Ok(0)
        }
        Cmd::Errors { common, replay } => {
            let g = commands::cmd_errors(&common.run_config(), &replay.lambda, replay.field.as_deref())?;
            print_gap(&g);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}

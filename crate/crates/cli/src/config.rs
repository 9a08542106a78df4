//! Command-line run configuration and the inputs it resolves to.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cascade_dispatch::io::{load_series, ConfigFile};
use cascade_dispatch::orchestrator::RunOptions;
use cascade_dispatch::system::{Series, System};
use cascade_dispatch::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub config: PathBuf,
    pub demand: Option<PathBuf>,
    /// dam index -> inflow CSV, overriding the config file
    pub inflow: BTreeMap<usize, PathBuf>,
    pub out: PathBuf,
    pub dt: Option<f64>,
    /// One value for every dimension, or one per dimension.
    pub dx: Option<Vec<f64>>,
    pub margin: Option<f64>,
    pub tol: Option<f64>,
    pub n_iter: Option<usize>,
    pub max_levels: Option<u32>,
    pub lambda0: Option<Vec<f64>>,
    pub beta_sweep: Option<Vec<f64>>,
    pub beta_epsilon: Option<f64>,
    pub persist_field: bool,
    pub reference: bool,
}

impl RunConfig {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        RunConfig {
            config: config.into(),
            demand: None,
            inflow: BTreeMap::new(),
            out: PathBuf::from("out"),
            dt: None,
            dx: None,
            margin: None,
            tol: None,
            n_iter: None,
            max_levels: None,
            lambda0: None,
            beta_sweep: None,
            beta_epsilon: None,
            persist_field: false,
            reference: false,
        }
    }

    /// Checks what can be checked without reading anything.
    pub fn validate(&self) -> Result<()> {
        let mut d = Vec::new();
        let mut need = |p: &Path, what: &str| {
            if !p.is_file() {
                d.push(format!("{what} file {} does not exist", p.display()));
            }
        };
        need(&self.config, "config");
        if let Some(p) = &self.demand {
            need(p, "demand");
        }
        for (dam, p) in &self.inflow {
            need(p, &format!("inflow (dam {dam})"));
        }
        let mut positive = |v: Option<f64>, what: &str| {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    d.push(format!("{what} = {v} must be positive"));
                }
            }
        };
        positive(self.dt, "dt");
        positive(self.margin, "margin");
        positive(self.beta_epsilon, "beta epsilon");
        for &x in self.dx.iter().flatten() {
            positive(Some(x), "dx");
        }
        if let Some(t) = self.tol {
            if !(t > 0.0 && t < 1.0) {
                d.push(format!("tol = {t} must lie in (0, 1)"));
            }
        }
        if self.n_iter == Some(0) {
            d.push("n-iter must be positive".into());
        }
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(d))
        }
    }

    pub fn load(&self) -> Result<Inputs> {
        self.validate()?;
        let file = ConfigFile::load(&self.config)?;
        let sys = System::new(file.system()?)?;
        let run = file.run.clone().unwrap_or_default();
        let horizon = run.horizon.unwrap_or(24.0);
        let base = self.config.parent().unwrap_or(Path::new("."));
        let series = load_series(&file, &sys.spec, base, self.demand.as_deref(), &self.inflow, horizon)?;

        let nd = sys.n_dams();
        let mut x0 = run.initial_volumes.clone().unwrap_or_else(|| vec![1.0; nd]);
        if x0.len() != nd {
            return Err(Error::Validation(vec![format!(
                "initial_volumes has {} entries for {nd} dams",
                x0.len()
            )]));
        }
        if sys.spec.battery.is_some() {
            x0.push(run.initial_charge.unwrap_or(1.0));
        }

        let mut opts = RunOptions::new(&sys);
        if let Some(l) = self.lambda0.clone().or(run.lambda0.clone()) {
            opts.lambda0 = l;
        }
        if let Some(v) = self.dt {
            opts.dt = v;
        }
        if let Some(dx) = &self.dx {
            opts.dx = match dx.len() {
                1 => vec![dx[0]; sys.n_states()],
                n if n == sys.n_states() => dx.clone(),
                n => {
                    return Err(Error::Validation(vec![format!(
                        "dx has {n} entries, the system has {} state dimensions",
                        sys.n_states()
                    )]))
                }
            };
        }
        if let Some(v) = self.margin {
            opts.margin = v;
        }
        if let Some(v) = self.tol {
            opts.tol = v;
        }
        if let Some(v) = self.n_iter {
            opts.n_iter = v;
        }
        if let Some(v) = self.max_levels {
            opts.max_levels = v;
            opts.min_levels = opts.min_levels.min(v);
        }
        if let Some(s) = &self.beta_sweep {
            opts.beta_sweep = s.clone();
        }
        if let Some(v) = self.beta_epsilon {
            opts.beta_epsilon = v;
        }
        opts.reference = self.reference;
        Ok(Inputs {
            sys,
            series,
            x0,
            horizon,
            opts,
        })
    }
}

/// Everything a command needs after parsing.
pub struct Inputs {
    pub sys: System,
    pub series: Series,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub opts: RunOptions,
}

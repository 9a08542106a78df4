use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("model validation failed: {0}")]
    Model(String),

    #[error("invalid input:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("infeasible power balance at t = {t_hours} h: shortfall {shortfall_kw:.3} kW ({context})")]
    Infeasible {
        t_hours: f64,
        shortfall_kw: f64,
        context: String,
    },

    #[error("CFL violated: Courant number {courant:.4} exceeds {limit}")]
    Cfl { courant: f64, limit: f64 },

    #[error("non-finite value in HJB sweep at level {level}, node {node}")]
    Numerical { level: usize, node: usize },

    #[error("{}: {msg}", .path.display())]
    Io { path: PathBuf, msg: String },

    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("every oracle evaluation failed: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}

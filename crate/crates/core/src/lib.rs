//! Short-term dispatch of a hydro-thermal system with a cascade of dams,
//! time-delayed water transport and a battery, by Lagrangian relaxation of
//! the delay constraints, an HJB grid solve per dual iterate and a
//! limited-memory bundle method on the dual.

pub mod error;
pub mod hjb;
pub mod io;
pub mod lmbm;
pub mod orchestrator;
pub mod relaxation;
pub mod simplex;
pub mod simulate;
pub mod smooth;
pub mod system;

pub use error::{Error, Result};

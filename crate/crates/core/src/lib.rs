//! Implicit-explicit two-step Peer methods for stiff split ODEs
//! `u' = F0(t,u) + F1(t,u)`.
//!
//! * [`tableau`] derives and certifies coefficient sets,
//! * [`stability`] evaluates the linear stability matrices and regions,
//! * [`integrator`] advances problems with the IMEX, implicit or explicit
//!   variant of a method,
//! * [`experiments`] holds the two benchmark problems and the convergence
//!   driver, and [`search`] the coefficient optimizer.

pub mod error;
pub mod exec;
pub mod experiments;
pub mod integrator;
pub mod linalg;
pub mod methods;
pub mod search;
pub mod stability;
pub mod tableau;

pub use error::{Error, Result};
pub use exec::Execution;
pub use methods::{builtin, resolve, BUILTIN_NAMES};
pub use tableau::{certify, fmt_f64, CertificationReport, MethodTableau, TableauParams};

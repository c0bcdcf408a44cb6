//! Random utility models with smallest extreme value (SEVI) errors.
//!
//! The crate covers the distribution primitives, closed-form SEVI choice
//! probabilities with their derivatives, a GHK probit baseline, welfare
//! measures, maximum likelihood estimation, model comparison tests, a
//! simulation lab, and long-format data ingestion.

pub mod accum;
pub mod design;
pub mod error;
pub mod estimation;
pub mod evd;
pub mod io;
pub mod kernel;
pub mod optim;
pub mod probit;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod subset;
pub mod welfare;

pub use error::{Error, Result};
pub use evd::Evd;
pub use kernel::{ErrorFamily, TruncationPolicy, UtilityVector};
pub use probit::GhkConfig;

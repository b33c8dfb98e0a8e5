//! Mean-field variational inference for continuous-time Bayesian networks.

pub mod density;
pub mod error;
pub mod io;
pub mod meanfield;
pub mod model;
pub mod ode;
pub mod oracle;
pub mod stats;
pub mod tree;

pub use error::{Error, Result};

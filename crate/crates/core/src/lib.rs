pub mod aggregation;
pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod model;
pub mod sampling;
pub mod synthetic;
pub mod tcn;

pub use error::{Result, SatcnError};

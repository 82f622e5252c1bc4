pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod federation;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod replay;
pub mod runner;
pub mod streams;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod dataio;
pub mod diffcore;
pub mod ensemble;
pub mod error;
pub mod evalharness;
pub mod exprec;
pub mod features;
pub mod reprec;
pub mod situsim;
pub mod training;

pub use error::{Error, Result};

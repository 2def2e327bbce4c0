pub mod cli;
pub mod config;
pub mod diag;
pub mod env;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod model;
pub mod optimize;
pub mod retro;
pub mod rollout;
pub mod trainer;

pub use config::{Mode, RunConfig};
pub use error::{Result, RrlError};

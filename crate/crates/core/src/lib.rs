pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod numerics;
pub mod params;
pub mod pretrain;
pub mod ssm;

pub use error::{Error, Result};

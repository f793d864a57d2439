pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod language;
pub mod model;
pub mod nn;
pub mod regression;
pub mod sequence;
pub mod sim;
pub mod slv;
pub mod tensor;
pub mod training;
pub mod vision;

pub use config::Config;
pub use error::{Error, Result};

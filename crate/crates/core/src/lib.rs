pub mod error;
pub mod metadata;
pub mod similarity;
pub mod svg;
pub mod commands;
pub mod model;
pub mod timeseries;
pub mod selection;
pub mod evaluation;
pub mod synthetic;
pub mod workflow;

pub use error::{Error, Result};

//! Experiment runner for the lottery-ticket desk benchmark: recipes, result
//! CSVs, aggregate reports and SVG figures.

pub mod config;
pub mod error;
pub mod modules;
pub mod plot;
pub mod presets;
pub mod report;
pub mod results;
pub mod runner;

pub use config::{ExperimentConfig, Recipe};
pub use error::{HarnessError, Result};

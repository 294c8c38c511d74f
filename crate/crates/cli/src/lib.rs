//! Experiment driver for `mbt`: config files, the staged pipeline and the
//! command-line front end.

pub mod app;
pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::{Run, Stage};

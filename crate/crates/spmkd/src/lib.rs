//! Synthetic pressure-map data, file formats and experiment plumbing around
//! `spmkd-core`.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod generator;
pub mod io;
pub mod plot;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use generator::{generate_sample, GeneratorConfig, SkeletonPose, SyntheticSample};
pub use io::{Dataset, Palette};

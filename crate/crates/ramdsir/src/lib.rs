//! Disk formats, run configuration, experiments and the command-line surface
//! around `ramdsir-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

//! Filesystem, process and network side of the co-design pipeline: config
//! files, language-model providers, external evaluator workers, run
//! directories, reports and the `codesign` command line.

pub mod bridge;
pub mod config;
pub mod fixture;
pub mod provider;
pub mod report;
pub mod runner;
pub mod store;

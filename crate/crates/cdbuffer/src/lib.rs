//! Storage formats, experiment configuration, reports and pipelines for the
//! `cdbuffer` command-line tool. The numerical work lives in
//! [`cdbuffer_core`].

pub mod config;
pub mod container;
pub mod error;
pub mod formats;
pub mod report;
pub mod run;

pub use cdbuffer_core as core;
pub use error::{RunError, RunResult};

//! Files, command line and the remote embedding client around `demul-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod remote;
pub mod report;

pub use error::{Error, Result};

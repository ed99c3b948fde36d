//! Command-line front end: configuration files, result tables, and the
//! command implementations behind the `epsm` binary.
//!
//! The numerical work all lives in `epsm-core`; this crate only turns
//! config files into models, runs one pipeline per command, and writes
//! comma-separated tables plus a key = value summary document.

use std::fmt;

pub mod config;
pub mod run;
pub mod table;

/// Failures split by exit code: rejected input (2) versus numerical or
/// I/O trouble at run time (3). Success is 0.
#[derive(Debug, Clone)]
pub enum CliError {
    /// Bad config file, bad override, bad flag value. Exit code 2.
    Validation(String),
    /// Non-convergence, gap closure, eigensolver or file-system failure
    /// after the input was accepted. Exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

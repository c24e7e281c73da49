//! Experiment harness for certified top-k CAM robustness: the `camcert`
//! command-line tool and the table/summary code behind it.

pub mod cli;
pub mod experiments;
pub mod output;
pub mod run;
pub mod stats;

use std::fmt;

/// Why a command failed; decides the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, arguments or files (exit 1).
    Validation(String),
    /// A result contradicts a guarantee, e.g. a certified radius above a
    /// successful attack (exit 2).
    Invariant(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Invariant(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "error: {m}"),
            Failure::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<camcert::Error> for Failure {
    fn from(e: camcert::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

//! Error type shared by all numeric modules.

use alloc::string::String;
use core::fmt;

use crate::volume::Dims;

/// Errors produced by the registration engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on the inputs does not hold (bad parameter, grid too
    /// small, infeasible pyramid, ...). The message states which one.
    InvalidInput(String),
    /// Two grids that must share dimensions do not.
    DimMismatch { left: Dims, right: Dims },
    /// A metric has no defined value for these inputs (e.g. Pearson
    /// correlation of two constant volumes).
    UndefinedMetric(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::DimMismatch { left, right } => {
                write!(f, "dimension mismatch: {left} vs {right}")
            }
            Error::UndefinedMetric(what) => write!(f, "undefined metric: {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

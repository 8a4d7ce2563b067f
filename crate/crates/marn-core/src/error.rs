use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two shapes that were required to agree do not.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A stated precondition was violated.
    Contract(String),
    /// A configuration value is out of its legal range.
    Config(String),
    /// A referenced entity (video id, token id) does not resolve.
    Lookup(String),
    /// A non-finite value surfaced where the math requires finite ones.
    Numeric(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Lookup(msg) => write!(f, "unresolved reference: {msg}"),
            CoreError::Numeric(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

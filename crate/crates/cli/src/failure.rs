use std::fmt;

use longevity_core::Error;

/// Run failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Unreadable or invalid input, bad arguments.
    Input(String),
    /// Nested estimate did not stabilise.
    Convergence(String),
    /// Broken internal invariant.
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Convergence(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Convergence(m) => write!(f, "convergence error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Convergence { .. } => Failure::Convergence(msg),
            Error::Numeric(_) | Error::PowerIteration(_) => Failure::Internal(msg),
            _ => Failure::Input(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(format!("writing output: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(format!("serialising output: {e}"))
    }
}

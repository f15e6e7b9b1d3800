use std::fmt;
use std::path::PathBuf;

use crate::decomposition::RoundTrace;

/// A grid coordinate, `(age, year)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub age: i32,
    pub year: i32,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(age {}, year {})", self.age, self.year)
    }
}

fn list_cells(cells: &[Cell]) -> String {
    const SHOWN: usize = 20;
    let mut s = cells
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if cells.len() > SHOWN {
        s.push_str(&format!(" and {} more", cells.len() - SHOWN));
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing cells in mortality grid: {}", list_cells(.missing))]
    MissingCells { missing: Vec<Cell> },

    #[error("duplicate cell {cell} in mortality data")]
    DuplicateCell { cell: Cell },

    #[error("death probability {value} out of range (0, 1) at {cell}")]
    RateOutOfRange { cell: Cell, value: f64 },

    #[error("{0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no convergence after {} rounds", .trace.len())]
    Convergence { trace: Vec<RoundTrace> },

    #[error("power iteration did not converge within {0} iterations")]
    PowerIteration(usize),

    #[error("mortality table does not cover annuitants: {}", .ids.join(", "))]
    Coverage { ids: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

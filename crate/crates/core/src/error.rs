use thiserror::Error;

use crate::dcsolver::SolverTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("SCA solver did not converge after {} iterations (rank-one residual {:.3e})", .0.iterations(), .0.final_residual())]
    NotConverged(Box<SolverTrace>),

    #[error("inner solver stalled: {0}")]
    Stall(String),

    #[error("IDX parse error at byte offset {offset}: {message}")]
    Idx { offset: u64, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::Dimension {
                context,
                expected,
                actual,
            })
        }
    }
}

use thiserror::Error;

/// Errors raised by panel handling, the solvers and the estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("csv error at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("unbalanced panel: missing cells {}", format_cells(.missing))]
    Unbalanced { missing: Vec<(String, i64)> },

    #[error("duplicate cell (unit {unit}, period {period}) at row {row}")]
    DuplicateCell { unit: String, period: i64, row: usize },

    #[error("unknown unit label `{0}`")]
    UnknownUnit(String),

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("singular system: {what} (numerical rank {rank} of {dim})")]
    Singular {
        what: &'static str,
        rank: usize,
        dim: usize,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPsd { .. } | Error::Infeasible(_) | Error::Solver(_) | Error::Singular { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

fn format_cells(cells: &[(String, i64)]) -> String {
    const SHOWN: usize = 10;
    let mut parts: Vec<String> = cells
        .iter()
        .take(SHOWN)
        .map(|(u, p)| format!("({u}, {p})"))
        .collect();
    if cells.len() > SHOWN {
        parts.push(format!("... {} more", cells.len() - SHOWN));
    }
    parts.join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the toolkit.
///
/// The variants map onto the CLI exit codes: validation problems (domain,
/// structural, parse) exit with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, grids or indices do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A document could not be parsed or validated.
    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    /// The steady-state iteration did not reach the requested tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Box<Vec<Vec<num_complex::Complex64>>>,
    },

    /// The time-domain simulation had not settled in the last period.
    #[error("transient not settled: last-two-period discrepancy {discrepancy:.3e}")]
    NotSettled { discrepancy: f64 },

    /// A solve failed for a specific realization.
    #[error("realization {m}: {source}")]
    Realization {
        m: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. } | Error::NotSettled { .. } => true,
            Error::Realization { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

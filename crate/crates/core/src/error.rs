use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a documented precondition.
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },

    #[error("point {point:?} lies outside the closed orthant")]
    OutsideDomain { point: Vec<f64> },

    /// A numerical configuration that would break a scheme invariant
    /// (monotonicity, stencil positivity).
    #[error("configuration: {0}")]
    Config(String),

    #[error("skorokhod projection did not converge from {point:?} with displacement {displacement:?}")]
    Skorokhod {
        point: Vec<f64>,
        displacement: Vec<f64>,
    },

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("path {index}: {source}")]
    BatchPath {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("solver: {0}")]
    Solver(String),

    #[error("interpolation: {0}")]
    Interpolation(String),

    #[error("estimation: {0}")]
    Estimation(String),

    #[error("solve at k={k}, alpha={alpha}: {source}")]
    Ladder {
        k: f64,
        alpha: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            what: what.into(),
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0} must be square")]
    NotSquare(&'static str),

    #[error("singular linear operator in {context} (condition estimate {condition:.3e})")]
    Singular {
        context: &'static str,
        condition: f64,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("gain is not admissible (mean-square spectral abscissa {abscissa:.6e})")]
    NotAdmissible { abscissa: f64 },

    #[error("Newton step {iteration} failed: {reason}")]
    NewtonStep { iteration: usize, reason: String },

    #[error("no convergence after {iterations} iterations (last relative step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("simulation diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error(
        "data matrix is rank deficient (rank {rank}, need {required}); \
         persistent excitation is violated: increase the exploration signal or the number of intervals"
    )]
    RankDeficient { rank: usize, required: usize },

    #[error("policy iteration diverged at iteration {iteration}: |P|_F = {norm:.3e}")]
    IterationDiverged { iteration: usize, norm: f64 },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

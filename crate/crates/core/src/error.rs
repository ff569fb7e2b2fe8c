use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("steering angle {0} rad is outside (-pi/2, pi/2)")]
    SteeringDomain(f64),

    /// `1 - d*kappa <= 0`: the state cannot be projected onto the path.
    /// Carries the offending (possibly intermediate) state vector.
    #[error("curvilinear singularity: 1 - d*kappa = {margin} at state {state:?}")]
    Singular { margin: f64, state: Vec<f64> },

    #[error("arc length {s} outside open path of length {length}")]
    OutOfRange { s: f64, length: f64 },

    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),

    #[error("invalid reference path: {0}")]
    InvalidPath(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("QP input error: {0}")]
    QpInput(String),

    #[error("KKT system is singular")]
    SingularKkt,

    #[error("{count} obstacles exceed the {slots} available constraint slots")]
    TooManyObstacles { count: usize, slots: usize },

    #[error("obstacle cannot be covered: {0}")]
    Uncoverable(String),

    #[error("no strictly safe NMPC solution: {0}")]
    NoSafeSolution(String),

    #[error("dataset generation rejected {rejected} of {attempted} episodes")]
    RejectionRate { rejected: usize, attempted: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
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

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

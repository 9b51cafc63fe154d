use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("matrix is not negative definite: {0}")]
    NotNegativeDefinite(String),

    #[error("step {t} is beyond the schedule horizon {horizon}")]
    HorizonExceeded { t: u64, horizon: u64 },

    #[error("blockwise plan infeasible: {0}")]
    PlanInfeasible(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("nonpositive error value {value} at t = {t}")]
    NonpositiveError { t: u64, value: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::UnknownPreset(_)
            | Error::HorizonExceeded { .. }
            | Error::InsufficientData(_)
            | Error::NonpositiveError { .. } => 2,
            Error::DegenerateInstance(_)
            | Error::NotErgodic(_)
            | Error::SingularOperator(_)
            | Error::NotNegativeDefinite(_)
            | Error::PlanInfeasible(_) => 3,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Parse(_) => 4,
        }
    }
}

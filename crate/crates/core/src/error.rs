use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("subject {id}: missing stage {stage}")]
    MissingStage { id: String, stage: usize },
    #[error("subject {id}: duplicate record for stage {stage}")]
    DuplicateStage { id: String, stage: usize },
    #[error("subject {id}: treatment {treatment} outside 1..={k}")]
    TreatmentOutOfRange {
        id: String,
        treatment: i64,
        k: usize,
    },
    #[error("csv {path}, line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("non-positive joint propensity for subject {0}")]
    NonPositivePropensity(String),
    #[error("C_Q log argument {value} <= 0 at grid point {s} (t = {t})")]
    CqDomain { s: usize, t: f64, value: f64 },
    #[error("all {0} replications were skipped")]
    AllReplicationsSkipped(usize),
    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,
    #[error("treatment arm {arm} is empty at stage {stage}")]
    EmptyArm { stage: usize, arm: usize },
    #[error("censoring rate {target} not attainable (closest {achieved})")]
    CalibrationFailed { target: f64, achieved: f64 },
    #[error("every cross-validation fold was skipped")]
    AllFoldsSkipped,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DtrError>;

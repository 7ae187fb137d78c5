use mksd::MksdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: invalid rotation (Frobenius defect {defect:e})")]
    InvalidRotation { line: usize, defect: f64 },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] MksdError),
}

impl CliError {
    /// 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse { .. } | CliError::InvalidRotation { .. } | CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                MksdError::InvalidParameter(_)
                | MksdError::ChartMismatch { .. }
                | MksdError::DimensionMismatch { .. }
                | MksdError::EmptyGrid => 2,
                MksdError::SingularChartPoint { .. }
                | MksdError::GimbalLock { .. }
                | MksdError::TooFewSamples { .. }
                | MksdError::EmptyReferenceSample => 3,
                MksdError::EigendecompositionFailure | MksdError::QuadratureUnderResolved { .. } => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

use measync::{DatagenError, SyncError};
use thiserror::Error;

/// Process-level failure, carrying the exit code contract: 2 for flag
/// problems, 1 for I/O, file-content, or runtime failures. Exit 3 (Sinkhorn
/// edges that never converged) is a warning, not an error, and is returned as
/// a success code by the sync command itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Fatal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Fatal(_) => 1,
        }
    }
}

/// Sorts optimizer errors into flag problems (bad parameter values or
/// incompatible combinations) and data or runtime failures.
pub fn classify_sync(err: SyncError) -> CliError {
    match err {
        SyncError::BadParameter { .. }
        | SyncError::NoParticles
        | SyncError::BadSchedule
        | SyncError::UnsupportedStepRule
        | SyncError::SinkhornNeedsConstraint
        | SyncError::NeedsRegularizer
        | SyncError::ModeMismatch
        | SyncError::CameraCountMismatch { .. }
        | SyncError::GaugeMismatch { .. }
        | SyncError::GaugeSharedWeights => CliError::Usage(err.to_string()),
        _ => CliError::Fatal(err.to_string()),
    }
}

/// Generator errors: everything reachable from flag values is a usage error.
pub fn classify_datagen(err: DatagenError) -> CliError {
    match err {
        DatagenError::TooFewCameras { .. }
        | DatagenError::NoParticles
        | DatagenError::CompletenessOutOfRange { .. }
        | DatagenError::ConnectivityFailed { .. }
        | DatagenError::BadSigma { .. }
        | DatagenError::CameraCountMismatch { .. } => CliError::Usage(err.to_string()),
        _ => CliError::Fatal(err.to_string()),
    }
}

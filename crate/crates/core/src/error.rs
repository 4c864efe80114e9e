use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The variants split into two families: input problems the caller can fix
/// (`Validation`, `Structural`, `SingularTransform`) and failures of the run
/// itself (I/O, malformed files, diverged training).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("singular blended skinning transform at vertex {vertex} (|det| = {det:.3e})")]
    SingularTransform { vertex: usize, det: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        /// Parameter tensor whose gradient went non-finite, if known.
        tensor: Option<String>,
        reason: String,
        /// Checkpoint holding the last finite parameters, if one was written.
        last_good: Option<PathBuf>,
    },

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{} item(s) failed:{}", failures.len(), itemize(failures))]
    Itemized { failures: Vec<(String, Error)> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn itemize(failures: &[(String, Error)]) -> String {
    failures.iter().map(|(item, e)| format!("\n  {item}: {e}")).collect()
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_) | Error::Structural(_) | Error::SingularTransform { .. } => true,
            Error::File { source, .. } => source.is_validation(),
            Error::Itemized { failures } => failures.iter().all(|(_, e)| e.is_validation()),
            _ => false,
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

macro_rules! validation {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}

pub(crate) use structural;
pub(crate) use validation;

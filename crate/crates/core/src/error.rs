use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LocaError> = std::result::Result<T, E>;

/// Every failure the library can surface.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto distinct exit codes: configuration problems, bad data, numeric
/// aborts and I/O.
#[derive(Debug, Error)]
pub enum LocaError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite value produced by {0}")]
    NumericDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("training diverged at iteration {iteration}: {diagnostics}")]
    NumericAbort { iteration: usize, diagnostics: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LocaError>,
    },

    #[error("file format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LocaError {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        LocaError::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LocaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        LocaError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage labels.
    pub fn root(&self) -> &LocaError {
        match self {
            LocaError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

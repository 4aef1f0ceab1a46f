use std::path::PathBuf;

/// Errors raised anywhere in the interval-construction workflow.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("incomplete panel at ({individual},{point})")]
    IncompletePanel { individual: String, point: usize },

    #[error("positivity violation: propensity {value} at ({individual},{point}) is not inside (0,1)")]
    Positivity {
        individual: String,
        point: usize,
        value: f64,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("all calibration weights underflow to zero for target decision point {target}")]
    DegenerateWeights { target: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
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

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariate column {column} has zero variance")]
    DegenerateColumn { column: usize },

    #[error("metric matrix is not positive definite: {0}")]
    SingularMetric(String),

    /// Every local slope vanished, so the direction update is undetermined.
    #[error("flat link: local slopes are all numerically zero")]
    FlatLink,

    #[error("basis functions are collinear (design rank {rank} < {expected})")]
    CollinearBasis { rank: usize, expected: usize },

    #[error("variogram is underdetermined: {0}")]
    UnderdeterminedVariogram(String),

    #[error("kriging system is ill-conditioned: {0}; consider a positive nugget floor")]
    Conditioning(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for file-system and file-format failures.
    pub fn is_io(&self) -> bool {
        matches!(self.root(), Error::Io(_) | Error::Csv(_) | Error::Json(_))
    }

    /// True for failures of the numerical routines (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularMetric(_)
                | Error::FlatLink
                | Error::CollinearBasis { .. }
                | Error::UnderdeterminedVariogram(_)
                | Error::Conditioning(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Caller-supplied data is out of range or malformed.
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    /// An API was used outside its contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Model tensors are mutually inconsistent, or a plan no longer fits the model.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Wraps an error with the pipeline stage that produced it.
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            // keep the innermost tag
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

/// Tags the error of a result with a stage name.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

use thiserror::Error;

/// Errors produced anywhere in the compression toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid input: bad network spec, mismatched plan, bad config.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or batch shape does not match what the network expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The requested compression ratio cannot be met even with every layer at its floor.
    #[error("infeasible budget: requested {requested:.4}x but at most {max_achievable:.4}x is reachable")]
    Infeasible { requested: f64, max_achievable: f64 },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    /// A numeric input contained NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed binary container.
    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Read a whole file as UTF-8, naming the path on failure.
pub fn read_text(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::at(path))
}

/// Write a file, naming the path on failure.
pub fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(Error::at(path))
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File { path: path.to_path_buf(), source }
    }

    /// Wrap with the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// Process exit status: 2 for invalid input, 3 for an unreachable
    /// budget, 4 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Infeasible { .. } => 3,
            Error::Diverged { .. } | Error::NonFinite(_) => 4,
            _ => 2,
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

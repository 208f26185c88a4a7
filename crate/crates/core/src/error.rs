use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-greppable code used by the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARGUMENT",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Numerical(_) => "E_NUMERICAL",
            Error::Tape(_) => "E_TAPE",
            Error::Data(_) => "E_DATA",
            Error::Config(_) => "E_CONFIG",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Io(_) => "E_IO",
        }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numerical abort,
    /// 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
            Error::NonFinite { .. } | Error::Numerical(_) => 4,
            Error::Shape { .. } | Error::Tape(_) => 1,
        }
    }
}

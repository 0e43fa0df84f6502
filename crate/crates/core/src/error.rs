use thiserror::Error;

/// Errors produced anywhere in the prediction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("column `{column}` cannot be imputed: every entry is missing")]
    Unimputable { column: String },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("confidence interval undefined: {0}")]
    UndefinedInterval(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("sweep failed at m = {m}: {source}")]
    Sweep {
        m: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("harness error: {0}")]
    Harness(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Size(_) => "size",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Unimputable { .. } => "unimputable",
            Error::DegenerateDesign(_) => "degenerate-design",
            Error::Selection(_) => "selection",
            Error::UndefinedInterval(_) => "undefined-interval",
            Error::Undefined(_) => "undefined",
            Error::Sweep { .. } => "sweep",
            Error::Harness(_) => "harness",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

use crate::estimation::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("model spec error at `{path}`: {message}")]
    Spec { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined trade-off: {0}")]
    UndefinedTradeOff(String),

    /// No start reached the gradient tolerance. The best local solution is
    /// kept so callers can inspect it.
    #[error("estimation did not converge on any of {starts} starts (best LL {best_ll:.4})")]
    NotConverged {
        starts: usize,
        best_ll: f64,
        best: Box<FitResult>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn spec(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Spec { .. } => "spec",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::UndefinedTradeOff(_) => "undefined_trade_off",
            Error::NotConverged { .. } => "not_converged",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

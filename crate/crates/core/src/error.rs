use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or dimensions do not satisfy an operation's contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at byte offset {offset}: {message}")]
    Truncated { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A split protocol or attention mask leaves nothing to work with.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("divergence: {0}")]
    Divergence(String),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Contract { op, detail: format!("incompatible shapes {a:?} and {b:?}") }
    }

    /// Short machine-parsable category used by the command-line driver.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract { .. } => "contract",
            Error::Degenerate { .. } => "degenerate",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Truncated { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Infeasible(_) => "infeasible",
            Error::State(_) => "state",
            Error::Misuse(_) => "misuse",
            Error::Divergence(_) => "divergence",
        }
    }
}

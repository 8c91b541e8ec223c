use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A parameter or intermediate value is outside the numeric domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("derivative order {order} exceeds the model's smoothness class (max {max})")]
    UnsupportedOrder { order: u32, max: u32 },

    /// The requested check does not apply to this model.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("level set has zero conditioning mass ({0})")]
    ConditioningMass(String),

    #[error("insufficient data: {detail}")]
    InsufficientData {
        detail: String,
        smallest_usable_epsilon: Option<f64>,
    },

    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<u64>, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn insufficient(detail: impl Into<String>, smallest: Option<f64>) -> Self {
        Error::InsufficientData {
            detail: detail.into(),
            smallest_usable_epsilon: smallest,
        }
    }
}

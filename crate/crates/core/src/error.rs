use alloc::string::String;

/// Errors raised by the engine, the blocks and the training machinery.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A tensor extent did not match what the operation requires.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        detail: String,
    },
    /// A hyperparameter or configuration value is invalid.
    #[error("configuration error in `{field}`: {detail}")]
    Config { field: String, detail: String },
    /// An operation was invoked while required state was missing.
    #[error("state error: {0}")]
    State(String),
    /// The API was used outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

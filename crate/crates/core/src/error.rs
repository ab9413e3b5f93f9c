use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value left its admissible set (C^d, O^d, PSD, ...).
    #[error("domain error{}: {detail}", step_suffix(*.step))]
    Domain { detail: String, step: Option<usize> },

    #[error("singular matrix{} in {context}", step_suffix(*.step))]
    Singular { step: Option<usize>, context: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn step_suffix(step: Option<usize>) -> String {
    step.map(|k| format!(" at step {k}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain {
            detail: msg.into(),
            step: None,
        }
    }

    pub(crate) fn domain_at(step: usize, msg: impl Into<String>) -> Self {
        Error::Domain {
            detail: msg.into(),
            step: Some(step),
        }
    }

    /// Attaches a step index to domain and singularity errors.
    pub(crate) fn at_step(self, k: usize) -> Self {
        match self {
            Error::Domain { detail, step: None } => Error::Domain {
                detail,
                step: Some(k),
            },
            Error::Singular {
                step: None,
                context,
            } => Error::Singular {
                step: Some(k),
                context,
            },
            other => other,
        }
    }

    /// True for numerical failures (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Domain { .. } | Error::Singular { .. })
    }
}

use thiserror::Error;

/// Errors raised by the sequential-design library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter violates its documented domain (bad kernel, bad rule size, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A numerical routine could not produce a trustworthy result.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The operation is undefined for the current posterior state.
    #[error("invalid state: {0}")]
    State(String),
    /// A failure inside a sequential run, tagged with the step that raised it.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// The innermost error, with step tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

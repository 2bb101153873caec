use std::fmt;
use std::process::ExitCode;

use cloplab_core::Error;

/// A failed command, split by exit code: 2 for bad input, 1 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument { .. }
            | Error::TooManyClasses { .. }
            | Error::InsufficientLabels { .. }
            | Error::LabelOutOfRange { .. }
            | Error::BadPairMap(_) => Failure::Usage(e.to_string()),
            Error::ZeroNormRow(_)
            | Error::ShapeMismatch { .. }
            | Error::ConvergenceFailure { .. }
            | Error::DivergedToZero { .. }
            | Error::NonFinite { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

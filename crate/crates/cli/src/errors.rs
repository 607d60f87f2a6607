//! Process-level failure classification behind the exit-code contract:
//! 0 success, 1 validation problems, 2 numeric problems (divergence or
//! failed gradient checks).

use std::fmt;

use pumlc_core::Error as CoreError;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(msg) => write!(f, "{msg}"),
            Failure::Numeric(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) | CoreError::Domain(_) => {
                Failure::Numeric(format!("{e}"))
            }
            other => Failure::Validation(format!("{other}")),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(format!("json error: {e}"))
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn validation(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

pub fn numeric(msg: impl Into<String>) -> Failure {
    Failure::Numeric(msg.into())
}

//! Command failures and their exit codes.

use std::fmt;

use msplat_core::Error;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

impl Fail {
    pub fn config(message: impl Into<String>) -> Fail {
        Fail {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Fail {
        Fail {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        let code = match e {
            Error::NonFiniteLoss(_) => EXIT_NUMERIC,
            Error::InvalidPlan(_)
            | Error::InvalidSpec(_)
            | Error::EmptyBandList
            | Error::UnknownBandName(_)
            | Error::UnknownBand(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Fail {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Fail {
        Fail::data(e.to_string())
    }
}

/// Attaches context and an exit code to foreign errors.
pub trait FailExt<T> {
    fn config(self, context: impl fmt::Display) -> Result<T, Fail>;
    fn data(self, context: impl fmt::Display) -> Result<T, Fail>;
}

impl<T, E: fmt::Display> FailExt<T> for Result<T, E> {
    fn config(self, context: impl fmt::Display) -> Result<T, Fail> {
        self.map_err(|e| Fail::config(format!("{context}: {e}")))
    }

    fn data(self, context: impl fmt::Display) -> Result<T, Fail> {
        self.map_err(|e| Fail::data(format!("{context}: {e}")))
    }
}

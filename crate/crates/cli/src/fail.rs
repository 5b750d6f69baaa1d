use std::fmt;

use plgt_core::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure { code: USAGE, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure { code: DATA, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Failure { code: NUMERIC, message: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => USAGE,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => DATA,
            Error::Domain { .. } | Error::Training(_) | Error::Shape { .. } | Error::Contract(_) => NUMERIC,
        };
        Failure { code, message: e.to_string() }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Attaches a path to I/O errors, which are data errors here.
pub fn io_ctx<T>(r: std::io::Result<T>, what: &str, path: &std::path::Path) -> CmdResult<T> {
    r.map_err(|e| Failure::data(format!("cannot {what} {}: {e}", path.display())))
}

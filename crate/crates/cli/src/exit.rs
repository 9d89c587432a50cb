//! Stable exit codes.

use std::fmt;

use tiedrank::Error;

pub const OK: i32 = 0;
pub const FAILURE: i32 = 1;
pub const USAGE: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const MISMATCH: i32 = 4;
pub const GRADCHECK: i32 = 5;

/// An error that already knows its exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: i32,
    pub msg: String,
}

impl Fail {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: USAGE, msg: msg.into() }
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Self {
            code: MISMATCH,
            msg: msg.into(),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> Fail {
    Fail::usage(msg)
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Fail {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    if let Some(f) = err.downcast_ref::<Fail>() {
        return f.code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => NUMERIC,
        Some(Error::Checkpoint(_) | Error::Parse { .. } | Error::Schema(_) | Error::Integrity(_) | Error::Dimension { .. }) => {
            MISMATCH
        }
        Some(Error::Config(_) | Error::Io { .. } | Error::TooShort { .. }) => USAGE,
        _ => FAILURE,
    }
}

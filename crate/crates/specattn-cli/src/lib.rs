//! IO companion to `specattn-core`: the weight-file format, run
//! configuration, report writers, and the command implementations behind the
//! `specattn` binary.

pub mod commands;
pub mod config;
pub mod reports;
pub mod weights;

use std::fmt;

/// Marker for configuration and usage problems; the binary maps these to
/// exit code 2 (everything else fails with 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err
        .chain()
        .any(|cause| cause.downcast_ref::<UsageError>().is_some())
    {
        2
    } else {
        1
    }
}

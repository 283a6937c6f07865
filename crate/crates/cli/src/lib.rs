//! Command-line front end and HTTP service for `ivsgen`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod files;
pub mod server;

use std::fmt;

pub use commands::{run, Cli};

/// An invocation that parsed but cannot be carried out as given.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Maps a command error onto the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

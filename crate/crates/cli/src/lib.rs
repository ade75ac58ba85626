// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library side of the `patchlens` binary: configuration, the model
//! registry, the session cache, the HTTP service and report plots.

pub mod config;
pub mod plots;
pub mod registry;
pub mod server;
pub mod session;

use patchlens_core::{Error, ErrorKind};

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Input => 1,
        ErrorKind::Model => 2,
        ErrorKind::Internal => 3,
    }
}

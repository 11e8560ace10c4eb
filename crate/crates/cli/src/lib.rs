//! Workflows behind the `fame` binary.

pub mod commands;
pub mod config;
pub mod manifest;

use fame_core::FameError;

/// Diagnostic kind for an error chain: `io`, `config`, `shape` or `numeric`.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FameError>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return "io";
        }
    }
    "config"
}

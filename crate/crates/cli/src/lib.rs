//! Command-line front end: configuration, subcommands and exit codes.

pub mod commands;
pub mod config;

use seasonal_dstm::Error;
use serde_json::json;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Exit code and report kind for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::InvalidArgument(_) | Error::IncompletePanel { .. } | Error::Data(_) | Error::DegenerateCycle => (EXIT_VALIDATION, "validation"),
        Error::Numerical(_) => (EXIT_NUMERICAL, "numerical"),
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => (EXIT_IO, "io"),
    }
}

/// Machine-readable error report written to stderr.
pub fn error_report(e: &Error) -> serde_json::Value {
    let (code, kind) = classify(e);
    let mut report = json!({ "error": { "kind": kind, "exit_code": code, "message": e.to_string() } });
    if let Error::IncompletePanel { gaps } = e {
        report["error"]["gaps"] = json!(gaps.iter().take(100).collect::<Vec<_>>());
        report["error"]["gap_count"] = json!(gaps.len());
    }
    report
}

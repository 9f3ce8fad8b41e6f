//! Command-line front end: config loading, dataset ingestion and the
//! train / calibrate / eval / search commands.

pub mod commands;
pub mod config;
pub mod ingest;

use qembed::ErrorKind;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for a failed command. I/O failures on inputs count
/// as data errors.
pub fn exit_code(err: &qembed::Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data | ErrorKind::Io => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

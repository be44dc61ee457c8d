//! Command-line pipeline around the `maskguide` library: configuration,
//! image I/O, run records and self-checks.

pub mod config;
pub mod io;
pub mod pipeline;
pub mod selfcheck;

use maskguide::Error;

pub const EXIT_BAD_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_GEOMETRY: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
/// A replay produced a different output hash.
pub const EXIT_REPLAY_MISMATCH: i32 = 6;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Geometry(_) => EXIT_GEOMETRY,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Shape(_) => EXIT_GEOMETRY,
        Error::Invalid(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Nn(_) => {
            EXIT_BAD_CONFIG
        }
    }
}

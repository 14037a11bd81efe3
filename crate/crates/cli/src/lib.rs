//! Data ingestion, run configuration and subcommands of the `dsf` tool.

pub mod commands;
pub mod config;
pub mod idx;
pub mod report;

use dsf_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => exit::CONFIG,
        Error::Numeric(_) => exit::NUMERIC,
        Error::Format(_) | Error::Consistency(_) | Error::Shape(_) | Error::State(_) | Error::Io(_) => exit::DATA,
    }
}

/// Caps the worker pool at `DSF_THREADS` when set.
pub fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("DSF_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().map_err(|_| format!("DSF_THREADS must be a positive integer, got {value:?}"))?;
    if threads == 0 {
        return Err("DSF_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| e.to_string())
}

//! Command-line front end: argument parsing, file formats and report writers.

pub mod commands;
pub mod io;
pub mod manifest;
pub mod svg;

pub use commands::{exit_code, run, Cli};

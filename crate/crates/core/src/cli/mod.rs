//! Command-line surface, file formats and end-to-end pipeline helpers.

mod commands;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod synth;

pub use commands::{execute, run, Cli, Command, BASELINE_FILES};

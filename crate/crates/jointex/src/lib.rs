//! File formats, run directories and the work behind the `jointex` command.

pub mod commands;
pub mod formats;

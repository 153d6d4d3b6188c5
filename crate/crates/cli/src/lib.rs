//! Library side of the `ccfg` command: configuration, subcommands and text
//! artifact formats.

pub mod commands;
pub mod config;
pub mod io;

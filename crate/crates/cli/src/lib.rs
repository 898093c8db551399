//! Command implementations behind the `fishformer` binary.

pub mod ablate;
pub mod commands;
pub mod config;

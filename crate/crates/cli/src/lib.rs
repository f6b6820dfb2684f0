//! Command implementations behind the `ua` executable.

pub mod ablate;
pub mod commands;
pub mod error;
pub mod report;
pub mod verify;

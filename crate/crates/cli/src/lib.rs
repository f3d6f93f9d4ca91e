//! Command implementations behind the `qrec` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod world;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

//! Library surface of the CLI: configuration parsing and the command
//! implementations, kept callable from integration tests.

pub mod commands;
pub mod config;

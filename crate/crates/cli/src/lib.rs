//! Subcommand implementations behind the `bnrf` binary, exposed so tests can
//! drive the oracle suites and config handling directly.

pub mod commands;
pub mod config;
pub mod suites;

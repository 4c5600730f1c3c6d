//! Command-line layer: configuration, synthetic data, evaluation harness,
//! and the shared implementations behind the `gface` subcommands.

pub mod commands;
pub mod config;
pub mod eval;
pub mod synth;

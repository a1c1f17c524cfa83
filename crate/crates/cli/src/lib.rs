//! Command-line harness for the distillation experiments: strict config
//! parsing, the four commands (train-teacher, distill, eval, compare), and
//! exit-code mapping. The binary in `main.rs` is a thin clap wrapper over
//! [`commands`]; tests drive the command functions directly.

pub mod commands;
pub mod config;
pub mod error;

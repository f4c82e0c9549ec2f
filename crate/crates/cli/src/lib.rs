//! Experiment harness: config files, checkpoints, metric logs, reports and
//! the subcommands that tie them to the training library.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod svg;

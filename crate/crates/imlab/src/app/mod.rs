//! Configuration, presets, persistence and the experiment pipeline behind
//! the command line.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod presets;
pub mod snapshot;

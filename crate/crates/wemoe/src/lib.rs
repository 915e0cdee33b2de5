//! Std companion of `wemoe-core`: checkpoints, datasets, run configuration,
//! reports and the experiment pipeline behind the `wemoe` command.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use wemoe_core as core;

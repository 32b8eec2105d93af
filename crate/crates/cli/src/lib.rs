//! Batch pipeline behind the `panicle` binary.
//!
//! A sample is a directory holding any of `poses.json`, `masks/`,
//! `grid.json` or `cloud.ply` (plus `truth.json` for synthetic samples).
//! [`pipeline::run_sample`] runs every stage its inputs allow, in order.

pub mod commands;
pub mod config;
pub mod failure;
pub mod pipeline;
pub mod stages;

pub use config::PipelineConfig;
pub use failure::{Failure, FailureKind};

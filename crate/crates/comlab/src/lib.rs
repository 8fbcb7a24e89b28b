//! File formats, run orchestration and the command-line front end for
//! `comlab-core`.
//!
//! Every command writes its artifacts plus a `manifest.toml` holding the
//! resolved configuration and SHA-256 hashes, so a run can be replayed with
//! [`commands::rerun`] and compared byte for byte.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod manifest;
pub mod parallel;
pub mod report;

pub use error::{Error, Result};

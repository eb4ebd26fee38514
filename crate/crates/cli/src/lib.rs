//! Pipeline driver for the cognitive-chain timing model: stage runner,
//! reports, demo project generator, and the annotation API.

pub mod config;
pub mod demo;
pub mod error;
pub mod project;
pub mod report;
pub mod server;
pub mod stages;

pub use config::Config;
pub use error::{CliError, Result};
pub use project::{ChainSource, Filter, Project};

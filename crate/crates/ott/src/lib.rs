//! File formats, run configuration and subcommands for the `ott` tool.

mod bytes;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::RunConfig;
pub use corpus::{Corpus, CorpusError};
pub use error::CliError;

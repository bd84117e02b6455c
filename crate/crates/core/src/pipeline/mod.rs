//! Dataset I/O, configuration, reports and the command-line driver.

pub mod cli;
pub mod config;
pub mod io;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use cli::run_command;
pub use config::PipelineConfig;
pub use io::{read_dataset, write_dataset, DatasetManifest, SCHEMA_VERSION};

use crate::datagen::DatagenError;
use crate::loss::LossError;
use crate::spl::SplError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaMismatch { found: u32, supported: u32 },
    #[error("{}:{line}: malformed record: {message}", path.display())]
    MalformedRecord { path: PathBuf, line: usize, message: String },
    #[error("frame {frame}: raster {} not found", path.display())]
    MissingRaster { frame: String, path: PathBuf },
    #[error("{}: {message}", path.display())]
    BadPixmap { path: PathBuf, message: String },
    #[error("{}: record for unknown frame {frame}", path.display())]
    UnknownFrame { frame: String, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Spl(#[from] SplError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

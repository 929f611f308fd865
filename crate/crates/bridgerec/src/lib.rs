//! File formats, configuration, parallel evaluation and the command-line
//! driver around [`bridgerec_core`].

pub mod cli;
pub mod config;
pub mod experiments;
pub mod io;
pub mod parallel;

use std::path::PathBuf;

use thiserror::Error;

pub use bridgerec_core as core;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Contract(String),
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Contract(_) => 1,
            Error::Failed(_) => 2,
            Error::Io { .. } => 3,
        }
    }

    pub(crate) fn contract(e: impl std::fmt::Display) -> Self {
        Error::Contract(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Reading and writing datasets, checkpoints, embeddings and reports.

use std::fs;
use std::path::Path;

use bridgerec_core::checkpoint::Checkpoint;
use bridgerec_core::cluster::{parse_user_embeddings, UserEmbeddings};
use bridgerec_core::data::{Dataset, Ingested};

use crate::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_bytes(path, contents.as_bytes())
}

pub fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Parses a dataset file. Users that are too short are dropped and reported.
pub fn read_dataset(path: &Path) -> Result<Ingested> {
    let text = read_text(path)?;
    Dataset::parse(&text).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_text(path, &dataset.to_text())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::decode(&bytes).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.encode().map_err(Error::contract)?;
    write_bytes(path, &bytes)
}

/// Per-user embedding file, one `user v1 v2 ...` line each.
pub fn read_user_embeddings(path: &Path, dataset: &Dataset) -> Result<UserEmbeddings> {
    let text = read_text(path)?;
    parse_user_embeddings(&text, dataset).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

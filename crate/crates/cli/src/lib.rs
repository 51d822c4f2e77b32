//! Subcommands of the `transfuser` binary, usable as a library so tests can
//! drive the pipeline in-process.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use transfuser_core::eval::EvalError;
use transfuser_core::fusion::FusionError;
use transfuser_core::model::ModelError;
use transfuser_core::sim::dataset::{DatasetError, Manifest};
use transfuser_core::sim::SensorRig;
use transfuser_core::tensor::BlobError;
use transfuser_core::train::TrainError;

pub mod ablate;
pub mod attn;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod train;

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for usage and validation problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Dataset(DatasetError::Exists(_) | DatasetError::Range { .. }) => 2,
            CliError::Train(TrainError::Range { .. }) => 2,
            CliError::Model(ModelError::Unsupported(_) | ModelError::Unknown { .. }) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, text + "\n")
}

/// Loads a dataset manifest and checks it was recorded with `rig`.
pub(crate) fn load_dataset(dir: &Path, rig: &SensorRig, profile: &str) -> Result<Manifest> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Usage(format!("no dataset manifest in {}", dir.display())));
    }
    let m = transfuser_core::sim::load_manifest(dir)?;
    if &m.config.rig != rig {
        return Err(CliError::Usage(format!(
            "dataset {} was recorded with a different sensor rig than the {profile} profile",
            dir.display()
        )));
    }
    Ok(m)
}

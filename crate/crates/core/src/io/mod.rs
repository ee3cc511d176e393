//! Line-oriented text formats, the pipeline configuration and model writers.
//!
//! Numbers are written with 17 significant digits (`{:.16e}`) and a dot
//! decimal separator, so parsing a written file and writing it again gives
//! identical bytes. Readers accept `\n` and `\r\n` line endings. Text is
//! roughly 3x larger than a binary encoding; a binary variant of the same
//! records would be the upgrade path for large collections.

mod config;
mod formats;
mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{PipelineConfig, ENV_PREFIX};
pub use formats::{
    cameras_to_text, intrinsics_to_text, parse_cameras, parse_intrinsics, parse_scene_spec,
    parse_tie_points, point_cloud_to_ply, scene_spec_to_text, tie_points_to_text, KeypointFile,
    MatchEdge, MatchFile,
};
pub use pipeline::{engine_images, match_images};

use crate::geometry::Model;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", .path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{}: {}", .path.display(), .error.line, .error.message)]
    Parse { path: PathBuf, error: ParseError },
}

impl IoError {
    pub fn path(&self) -> &Path {
        match self {
            IoError::File { path, .. } | IoError::Parse { path, .. } => path,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `path` and parses it, attaching the path to parse errors.
pub fn read_with<T>(
    path: &Path,
    parse: impl FnOnce(&str) -> Result<T, ParseError>,
) -> Result<T, IoError> {
    parse(&read_text(path)?).map_err(|error| IoError::Parse {
        path: path.to_path_buf(),
        error,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Files written for a model saved under `prefix`.
pub struct ModelPaths {
    pub cameras: PathBuf,
    pub tie_points: PathBuf,
    pub cloud: PathBuf,
}

impl ModelPaths {
    pub fn new(prefix: &Path) -> Self {
        Self {
            cameras: with_suffix(prefix, ".cameras.txt"),
            tie_points: with_suffix(prefix, ".points.txt"),
            cloud: with_suffix(prefix, ".ply"),
        }
    }
}

/// Writes the camera file, the tie-point file and the point cloud.
pub fn write_model(model: &Model, prefix: &Path) -> Result<ModelPaths, IoError> {
    let paths = ModelPaths::new(prefix);
    write_text(&paths.cameras, &cameras_to_text(model))?;
    write_text(&paths.tie_points, &tie_points_to_text(model))?;
    write_text(&paths.cloud, &point_cloud_to_ply(model))?;
    Ok(paths)
}

/// Reads the camera and tie-point files written by [`write_model`].
pub fn read_model(prefix: &Path) -> Result<Model, IoError> {
    let paths = ModelPaths::new(prefix);
    let mut model = read_with(&paths.cameras, parse_cameras)?;
    model.tie_points = read_with(&paths.tie_points, parse_tie_points)?;
    Ok(model)
}

/// Defaults, then the optional file, then `HSM_*` variables.
pub fn load_config<I, K, V>(file: Option<&Path>, env: I) -> Result<PipelineConfig, ConfigError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = PipelineConfig::default();
    if let Some(path) = file {
        let text = read_text(path)?;
        cfg.apply_text(&text).map_err(|error| IoError::Parse {
            path: path.to_path_buf(),
            error,
        })?;
    }
    cfg.apply_env(env).map_err(ConfigError::Invalid)?;
    Ok(cfg)
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Invalid(String),
}

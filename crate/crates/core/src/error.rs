use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("mask is empty")]
    EmptyMask,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("rank-deficient correspondence set")]
    Rank,

    #[error("zero rendered extent on observable axis {axis}")]
    DegenerateExtent { axis: usize },

    #[error("could not place {n_boxes} boxes without overlap after {attempts} attempts")]
    Placement { n_boxes: usize, attempts: usize },

    #[error("parse error in {}: offset {offset}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("pose estimation failed: {0}")]
    PoseEstimation(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

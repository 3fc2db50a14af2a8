use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Config(String),

    #[error("no counterpart for {orphan} in {missing_dir}")]
    Orphan { orphan: PathBuf, missing_dir: PathBuf },

    #[error("{file}: size {got:?} differs from {expected:?}")]
    SizeMismatch {
        file: PathBuf,
        expected: (u32, u32),
        got: (u32, u32),
    },

    #[error("{file}: {source}")]
    Image {
        file: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mfds_core::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

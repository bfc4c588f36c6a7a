//! Crate-wide error type.

use std::path::PathBuf;

use crate::engine::Stream;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a declared invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two operands disagree on shape.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value appeared where finite data is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index or count is outside its allowed range.
    #[error("range error: {0}")]
    Range(String),

    /// An operation received an activation from the wrong stream.
    #[error("stream error: expected {expected} stream, got {found}")]
    Stream { expected: Stream, found: Stream },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A hook misbehaved at a specific intervention point.
    #[error("intervention error at layer {layer}, timestep {timestep}, stream {stream}: {reason}")]
    Intervention {
        layer: usize,
        timestep: usize,
        stream: Stream,
        reason: String,
    },

    /// K-means could not form two clusters.
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Stored and recomputed checksums differ.
    #[error("CRC mismatch in record {index} (kind {kind}, layer {layer}, timestep {timestep}): stored {stored:#010x}, computed {computed:#010x}")]
    Crc {
        index: usize,
        kind: u8,
        layer: u16,
        timestep: u16,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported dump version {0}")]
    Version(u16),

    /// The byte stream does not follow the dump layout.
    #[error("malformed dump: {0}")]
    Format(String),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

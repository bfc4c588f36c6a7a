//! Serialization: MADF dumps, P2 graymaps, JSON and CSV reports.

mod madf;
mod pgm;

use std::fs;
use std::path::Path;

use serde::Serialize;

pub use madf::{
    decode, encode, read_dump, trajectory_from_records, trajectory_records, write_dump, write_trajectory, DumpRecord,
    RecordKind, LATENT_LAYER, MAGIC, VERSION,
};
pub use pgm::{heatmap_graymap, mask_graymap, read_graymap, write_graymap, Graymap};

use crate::error::{Error, Result};

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

/// CSV text with a header row taken from the record field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serialize(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(rows)?).map_err(|e| Error::io(path, e))
}

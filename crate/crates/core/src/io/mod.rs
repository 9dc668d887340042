//! Persistent formats: dataset manifests, TUM trajectories, COLMAP text
//! export, and a checksummed binary container for maps, features, matches
//! and vocabularies.

mod binary;
mod colmap;
mod manifest;
mod tum;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub use binary::{
    decode_features, decode_map, decode_matches, decode_vocabulary, encode_features, encode_map, encode_matches,
    encode_vocabulary, read_features, read_map, read_matches, read_vocab, write_features, write_map, write_matches,
    write_vocab, Kind, MatchTable, MAGIC, VERSION,
};
pub use colmap::{colmap_strings, write_colmap_sparse};
pub use manifest::{
    manifest_from_str, manifest_to_string, read_manifest, write_manifest, CameraEntry, DatasetManifest, ExtrinsicEntry,
    KeyframeEntry, PoseRecord, RigEntry, ShutterEntry,
};
pub use tum::{format_significant, read_tum, tum_from_str, tum_to_string, write_tum, TrajectoryRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("parse error at line {line}, field '{field}': {message}")]
    ParseError { line: usize, field: String, message: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("camera model has no COLMAP equivalent: {0}")]
    UnsupportedCameraKind(String),
    #[error("not a trajmap binary file")]
    BadMagic,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|e| IoError::Io(path.display().to_string(), e.to_string()))
}

pub(crate) fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::Io(path.display().to_string(), e.to_string()))
}

pub(crate) fn write_bytes(path: &Path, data: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::Io(dir.display().to_string(), e.to_string()))?;
    }
    std::fs::write(path, data).map_err(|e| IoError::Io(path.display().to_string(), e.to_string()))
}

/// `key = value` lines; `#` starts a comment. Later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::ParseError {
                line: i + 1,
                field: line.to_string(),
                message: "expected key=value".into(),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(IoError::ParseError {
                line: i + 1,
                field: String::new(),
                message: "empty key".into(),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    parse_config(&read_text(path)?)
}

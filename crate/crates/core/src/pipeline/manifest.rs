use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the two-set query protocol a song belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetLabel {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongMeta {
    pub song_id: String,
    pub clique_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artist: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<SetLabel>,
}

impl SongMeta {
    pub fn new(song_id: impl Into<String>, clique_id: impl Into<String>) -> Self {
        Self {
            song_id: song_id.into(),
            clique_id: clique_id.into(),
            title: None,
            artist: None,
            set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub meta: SongMeta,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

/// Reads a JSON array of entries and checks that song ids are unique and nonempty.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    validate_entries(&entries)?;
    Ok(entries)
}

pub fn validate_entries(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        if e.meta.song_id.is_empty() || e.meta.clique_id.is_empty() {
            return Err(Error::Manifest("song_id and clique_id must be nonempty".into()));
        }
        if !seen.insert(e.meta.song_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate song_id {}", e.meta.song_id)));
        }
    }
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

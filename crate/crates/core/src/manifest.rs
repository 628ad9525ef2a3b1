//! JSON-lines manifests for annotated pairs and plain image lists.
//!
//! Pair manifest, one object per line:
//!
//! ```text
//! {"schema_version":1,
//!  "source":{"path":"a.png","id":"a","category":"cat"},
//!  "target":{"path":"b.png","id":"b","category":"cat"},
//!  "keypoints":[{"source":{"x":1.0,"y":2.0,"label":"left paw","visible":true},
//!                "target":{"x":3.0,"y":4.0,"label":"left paw","visible":true}}],
//!  "target_bbox":{"x_min":0,"y_min":0,"x_max":10,"y_max":12}}
//! ```
//!
//! Relative image paths resolve against the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{BoundingBox, CorrespondencePair, Image, Keypoint};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub path: PathBuf,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ImageRecord {
    pub fn load(&self, root: &Path) -> Result<Image> {
        let path = resolve(root, &self.path);
        Image::load(&path, self.id.clone(), self.category.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub source: Keypoint,
    pub target: Keypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub source: ImageRecord,
    pub target: ImageRecord,
    pub keypoints: Vec<KeypointPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_bbox: Option<BoundingBox>,
}

impl PairRecord {
    pub fn category(&self) -> Option<&str> {
        self.source.category.as_deref().or(self.target.category.as_deref())
    }

    /// Loads both images. Keypoints flagged invisible on either side are dropped.
    pub fn load(&self, root: &Path) -> Result<CorrespondencePair> {
        let source = self.source.load(root)?;
        let target = self.target.load(root)?;
        let kps = self
            .keypoints
            .iter()
            .filter(|k| k.source.visible && k.target.visible)
            .map(|k| (k.source.clone(), k.target.clone()))
            .collect();
        CorrespondencePair::new(source, target, kps, self.target_bbox)
    }
}

pub(crate) fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn check_version(v: u32, path: &Path, line: usize) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::parse(
            format!("{}:{line}", path.display()),
            format!("unsupported schema_version {v} (expected {SCHEMA_VERSION})"),
        ));
    }
    Ok(())
}

/// Reads any JSON-lines file of records; blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::parse("record", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let recs: Vec<PairRecord> = read_jsonl(path)?;
    for (i, r) in recs.iter().enumerate() {
        check_version(r.schema_version, path, i + 1)?;
    }
    Ok(recs)
}

pub fn read_images(path: &Path) -> Result<Vec<ImageRecord>> {
    let recs: Vec<ImageRecord> = read_jsonl(path)?;
    for (i, r) in recs.iter().enumerate() {
        check_version(r.schema_version, path, i + 1)?;
    }
    Ok(recs)
}

/// Directory that relative paths in a manifest resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

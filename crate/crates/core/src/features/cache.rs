//! On-disk feature cache.
//!
//! Layout: one pair of files per entry inside the cache directory,
//!
//! ```text
//! <key>.f32   raw little-endian float32 tensor, row-major H x W x D
//! <key>.json  sidecar: {"schema_version":1,"key":..,"shape":[H,W,D],
//!             "image_size":[h,w],"normalized":bool,"config":{..},"created_at":secs}
//! ```
//!
//! The key is the hex SHA-256 of a canonical JSON description of the inputs.
//! Both files are written to a temporary name and renamed into place, tensor
//! first, so a visible sidecar always refers to a complete tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{DiffusionBackendConfig, ViTBackendConfig};
use crate::domain::FeatureMap;
use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "DISTILLCORR_CACHE";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    hex: String,
    description: Value,
}

impl CacheKey {
    /// Key for a single-backend extraction.
    pub fn new(image_id: &str, backend_id: &str, layer: usize, timesteps: &[u32], input_size: [usize; 2]) -> Self {
        Self::from_description(json!({
            "image_id": image_id,
            "backend_id": backend_id,
            "layer": layer,
            "timesteps": timesteps,
            "input_size": input_size,
        }))
    }

    /// Key for the fused teacher map of an image.
    pub fn fused(image_id: &str, vit: &ViTBackendConfig, diff: &DiffusionBackendConfig) -> Self {
        Self::from_description(json!({
            "image_id": image_id,
            "kind": "fused",
            "vit": serde_json::to_value(vit).expect("config serializes"),
            "diffusion": serde_json::to_value(diff).expect("config serializes"),
        }))
    }

    fn from_description(description: Value) -> Self {
        // serde_json maps are sorted by key, so to_string is canonical
        let canonical = description.to_string();
        let hex = hex::encode(Sha256::digest(canonical.as_bytes()));
        Self { hex, description }
    }

    pub fn as_str(&self) -> &str {
        &self.hex
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    key: String,
    shape: [usize; 3],
    image_size: [usize; 2],
    normalized: bool,
    config: Value,
    created_at: u64,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    /// Cache at `flag` if given, else at `$DISTILLCORR_CACHE`, else none.
    pub fn resolve(flag: Option<&Path>) -> Result<Option<Self>> {
        match flag {
            Some(p) => Self::new(p).map(Some),
            None => match std::env::var_os(CACHE_ENV) {
                Some(p) if !p.is_empty() => Self::new(PathBuf::from(p)).map(Some),
                _ => Ok(None),
            },
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, key: &CacheKey) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{}.f32", key.hex)), self.dir.join(format!("{}.json", key.hex)))
    }

    pub fn put(&self, key: &CacheKey, fm: &FeatureMap) -> Result<()> {
        let (tensor_path, sidecar_path) = self.paths(key);
        let mut bytes = Vec::with_capacity(fm.data().len() * 4);
        for v in fm.data().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.write_atomic(&tensor_path, &bytes)?;
        let (h, w, d) = fm.data().dim();
        let sidecar = Sidecar {
            schema_version: SIDECAR_VERSION,
            key: key.hex.clone(),
            shape: [h, w, d],
            image_size: [fm.image_size().0, fm.image_size().1],
            normalized: fm.is_normalized(),
            config: key.description.clone(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let text = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::parse("cache sidecar", e))?;
        self.write_atomic(&sidecar_path, &text)
    }

    /// Missing entries return `Ok(None)`.
    pub fn get(&self, key: &CacheKey) -> Result<Option<FeatureMap>> {
        let (tensor_path, sidecar_path) = self.paths(key);
        let Ok(text) = fs::read(&sidecar_path) else {
            return Ok(None);
        };
        let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::parse(sidecar_path.display().to_string(), e))?;
        let bytes = match fs::read(&tensor_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&tensor_path, e)),
        };
        let [h, w, d] = sidecar.shape;
        if bytes.len() != h * w * d * 4 {
            return Err(Error::parse(tensor_path.display().to_string(), "tensor length disagrees with sidecar shape"));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let data = Array3::from_shape_vec((h, w, d), values).expect("length checked");
        let fm = FeatureMap::new(data, (sidecar.image_size[0], sidecar.image_size[1]))?;
        if sidecar.normalized {
            fm.assume_normalized().map(Some)
        } else {
            Ok(Some(fm))
        }
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}

//! Training pair selection: annotated, random, same-category and
//! embedding-retrieval pairs.
//!
//! Index layout on disk (directory):
//!
//! ```text
//! embeddings.f32  raw little-endian float32, row-major M x E
//! ids.json        {"schema_version":1,"dim":E,"ids":[...]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::features::{VitBackend, ViTBackendConfig};

pub const DEFAULT_TOP_K: usize = 10;
const INDEX_VERSION: u32 = 1;

/// Global unit-norm embedding of an image.
pub fn embed(image: &Image, backend: &dyn VitBackend, cfg: &ViTBackendConfig) -> Result<Vec<f32>> {
    backend.embed(image, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Array2<f32>,
    ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IdsFile {
    schema_version: u32,
    dim: usize,
    ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Array2<f32>, ids: Vec<String>) -> Result<Self> {
        if embeddings.nrows() != ids.len() {
            return Err(Error::LengthMismatch(embeddings.nrows(), ids.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidValue(format!("duplicate id {dup} in index")));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let n = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidValue(format!("index row {i} has norm {n}")));
            }
        }
        Ok(Self { embeddings, ids })
    }

    /// Embeds every image with `backend`.
    pub fn build(images: &[Image], backend: &dyn VitBackend, cfg: &ViTBackendConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rows = images.iter().map(|im| embed(im, backend, cfg)).collect::<Result<Vec<_>>>()?;
        let dim = rows[0].len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let embeddings = Array2::from_shape_vec((images.len(), dim), flat).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(embeddings, images.iter().map(|im| im.id().to_string()).collect())
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join("embeddings.f32");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let ids = IdsFile { schema_version: INDEX_VERSION, dim: self.embeddings.ncols(), ids: self.ids.clone() };
        let path = dir.join("ids.json");
        let text = serde_json::to_vec_pretty(&ids).map_err(|e| Error::parse("index ids", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ids.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ids: IdsFile = serde_json::from_slice(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if ids.schema_version != INDEX_VERSION {
            return Err(Error::parse(path.display().to_string(), format!("unsupported schema_version {}", ids.schema_version)));
        }
        let path = dir.join("embeddings.f32");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != ids.ids.len() * ids.dim * 4 {
            return Err(Error::parse(path.display().to_string(), "matrix length disagrees with ids.json"));
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let embeddings = Array2::from_shape_vec((ids.ids.len(), ids.dim), values).expect("length checked");
        Self::new(embeddings, ids.ids)
    }

    /// Cosine similarity of row `i` against every row.
    fn scores(&self, i: usize) -> Vec<f64> {
        let q = self.embeddings.row(i);
        self.embeddings.rows().into_iter().map(|r| r.iter().zip(q.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()).collect()
    }

    /// Top-`k` ids by cosine similarity, excluding the query, ties by id.
    pub fn retrieve(&self, id: &str, k: usize) -> Result<Vec<String>> {
        Ok(self.retrieve_scored(id, k)?.into_iter().map(|(id, _)| id).collect())
    }

    pub fn retrieve_scored(&self, id: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let q = self.position(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let scores = self.scores(q);
        let mut order: Vec<usize> = (0..self.len()).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b])));
        Ok(order.into_iter().take(k).map(|j| (self.ids[j].clone(), scores[j])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Manual,
    Random,
    Category,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairStrategy {
    pub kind: PairKind,
    pub k: usize,
}

impl Default for PairStrategy {
    fn default() -> Self {
        Self { kind: PairKind::Retrieval, k: DEFAULT_TOP_K }
    }
}

impl PairStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.kind == PairKind::Retrieval && self.k == 0 {
            return Err(Error::ConfigInvalid("pairing.k must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a pair sampler sees of a dataset.
#[derive(Debug, Clone, Default)]
pub struct PairingDataset {
    pub ids: Vec<String>,
    pub categories: Vec<Option<String>>,
    /// Annotated `(source, target)` id pairs.
    pub manual: Vec<(String, String)>,
}

impl PairingDataset {
    pub fn from_images(images: &[Image]) -> Self {
        Self {
            ids: images.iter().map(|i| i.id().to_string()).collect(),
            categories: images.iter().map(|i| i.category().map(str::to_string)).collect(),
            manual: Vec::new(),
        }
    }
}

/// Precomputed partner lists for one strategy: image `i` may be paired with
/// any id in `partners[i]`. Random and category modes are both expressed this way.
#[derive(Debug, Clone)]
pub struct PairSampler {
    kind: PairKind,
    sources: Vec<String>,
    partners: Vec<Vec<String>>,
    manual: Vec<(String, String)>,
}

impl PairSampler {
    pub fn new(strategy: &PairStrategy, dataset: &PairingDataset, index: Option<&EmbeddingIndex>) -> Result<Self> {
        strategy.validate()?;
        let unavailable = |why: &str| Error::StrategyUnavailable(format!("{:?}: {why}", strategy.kind).to_lowercase());
        let mut sampler = Self { kind: strategy.kind, sources: Vec::new(), partners: Vec::new(), manual: Vec::new() };
        match strategy.kind {
            PairKind::Manual => {
                let manual: Vec<_> = dataset.manual.iter().filter(|(a, b)| a != b).cloned().collect();
                if manual.is_empty() {
                    return Err(unavailable("no annotated pairs"));
                }
                sampler.manual = manual;
                return Ok(sampler);
            }
            PairKind::Random => {
                for (i, id) in dataset.ids.iter().enumerate() {
                    let others: Vec<String> = dataset.ids.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o.clone()).collect();
                    sampler.push(id, others);
                }
            }
            PairKind::Category => {
                if dataset.categories.len() != dataset.ids.len() || dataset.categories.iter().any(Option::is_none) {
                    return Err(unavailable("images without categories"));
                }
                let mut by_cat: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
                for (id, cat) in dataset.ids.iter().zip(&dataset.categories) {
                    by_cat.entry(cat.as_deref().expect("checked")).or_default().push(id);
                }
                for (id, cat) in dataset.ids.iter().zip(&dataset.categories) {
                    let others = by_cat[cat.as_deref().expect("checked")].iter().filter(|o| **o != id).map(|o| (*o).clone()).collect();
                    sampler.push(id, others);
                }
            }
            PairKind::Retrieval => {
                let index = index.ok_or_else(|| unavailable("no embedding index"))?;
                for id in &dataset.ids {
                    let r = index.retrieve(id, strategy.k)?;
                    sampler.push(id, r);
                }
            }
        }
        if sampler.sources.is_empty() {
            return Err(unavailable("no image has a partner"));
        }
        Ok(sampler)
    }

    fn push(&mut self, id: &str, partners: Vec<String>) {
        let partners: Vec<String> = partners.into_iter().filter(|p| p != id).collect();
        if !partners.is_empty() {
            self.sources.push(id.to_string());
            self.partners.push(partners);
        }
    }

    pub fn kind(&self) -> PairKind {
        self.kind
    }

    /// Partner list of `id`, if it can be a source.
    pub fn partners(&self, id: &str) -> Option<&[String]> {
        self.sources.iter().position(|s| s == id).map(|i| self.partners[i].as_slice())
    }

    /// Draws `(I1, I2)`: `I1` uniform over eligible sources, `I2` uniform over its partners.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (String, String) {
        if self.kind == PairKind::Manual {
            return self.manual.choose(rng).expect("nonempty").clone();
        }
        let i = rand::Rng::random_range(rng, 0..self.sources.len());
        let j = self.partners[i].choose(rng).expect("nonempty");
        (self.sources[i].clone(), j.clone())
    }
}

/// One pair under `strategy`; see [`PairSampler`] for repeated draws.
pub fn sample_pair(strategy: &PairStrategy, dataset: &PairingDataset, index: Option<&EmbeddingIndex>, rng: &mut ChaCha8Rng) -> Result<(String, String)> {
    Ok(PairSampler::new(strategy, dataset, index)?.sample(rng))
}

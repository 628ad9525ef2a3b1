//! A small, deterministic ViT-shaped backbone used in place of real weights.
//!
//! Tokens come from a fixed random linear map of non-overlapping patches; the
//! map is symmetric under a left-right flip of the patch, and there are no
//! positional embeddings, so extracting from a mirrored image yields exactly
//! the mirrored grid. Each block is single-head attention with residual,
//! followed by a tanh MLP with residual.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::util::{gaussian_matrix, rng_from, softmax_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockVitConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for MockVitConfig {
    fn default() -> Self {
        Self { patch_size: 14, dim: 32, blocks: 4, mlp_ratio: 2, seed: 0 }
    }
}

/// Frozen weights of one block. Projections are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockVit {
    pub config: MockVitConfig,
    pub patch_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
}

impl MockVit {
    pub fn new(config: MockVitConfig) -> Result<Self> {
        if config.patch_size == 0 || config.dim == 0 || config.blocks == 0 || config.mlp_ratio == 0 {
            return Err(Error::ConfigInvalid(format!("mock-vit dimensions must be positive: {config:?}")));
        }
        let p = config.patch_size;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let seed = config.seed.to_string();
        let mut rng = rng_from(&["mock-vit", &seed, "embed"]);
        let patch_in = 3 * p * p;
        let raw = gaussian_matrix(d, patch_in, 2.0 / (patch_in as f64).sqrt(), &mut rng);
        // average each column with its left-right mirror inside the patch
        let mut patch_embed = raw.clone();
        for i in 0..p {
            for j in 0..p {
                for c in 0..3 {
                    let a = (i * p + j) * 3 + c;
                    let b = (i * p + (p - 1 - j)) * 3 + c;
                    let avg = (&raw.column(a) + &raw.column(b)) / 2.0;
                    patch_embed.column_mut(a).assign(&avg);
                }
            }
        }
        let sd = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|b| {
                let mut rng = rng_from(&["mock-vit", &seed, "block", &b.to_string()]);
                BlockWeights {
                    wq: gaussian_matrix(d, d, sd, &mut rng),
                    wk: gaussian_matrix(d, d, sd, &mut rng),
                    wv: gaussian_matrix(d, d, sd, &mut rng),
                    wo: gaussian_matrix(d, d, 0.5 * sd, &mut rng),
                    w1: gaussian_matrix(hidden, d, sd, &mut rng),
                    w2: gaussian_matrix(d, hidden, 0.5 / (hidden as f64).sqrt(), &mut rng),
                }
            })
            .collect();
        Ok(Self { config, patch_embed, blocks })
    }

    pub fn param_count(&self) -> usize {
        self.patch_embed.len()
            + self
                .blocks
                .iter()
                .map(|b| b.wq.len() + b.wk.len() + b.wv.len() + b.wo.len() + b.w1.len() + b.w2.len())
                .sum::<usize>()
    }

    /// Splits a (pre-resized) image into flattened, zero-centred patches.
    /// Returns the `N x 3p²` patch matrix and the `(rows, cols)` grid.
    pub fn patchify(&self, image: &Image) -> Result<(Array2<f64>, (usize, usize))> {
        let p = self.config.patch_size;
        let (h, w) = image.size();
        if h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input is not divisible by patch size {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let px = image.pixels();
        let mut out = Array2::zeros((gh * gw, 3 * p * p));
        for r in 0..gh {
            for c in 0..gw {
                let patch = px.slice(s![r * p..(r + 1) * p, c * p..(c + 1) * p, ..]);
                let mut row = out.row_mut(r * gw + c);
                for ((i, j, ch), v) in patch.indexed_iter() {
                    row[(i * p + j) * 3 + ch] = f64::from(*v) - 0.5;
                }
            }
        }
        Ok((out, (gh, gw)))
    }

    pub fn embed_patches(&self, patches: &Array2<f64>) -> Array2<f64> {
        patches.dot(&self.patch_embed.t())
    }

    /// Output tokens after block `layer` (0-based).
    pub fn forward(&self, patches: &Array2<f64>, layer: usize) -> Result<Array2<f64>> {
        if layer >= self.blocks.len() {
            return Err(Error::ConfigInvalid(format!("layer {layer} >= {} blocks", self.blocks.len())));
        }
        let mut x = self.embed_patches(patches);
        for block in &self.blocks[..=layer] {
            let q = x.dot(&block.wq.t());
            let v = x.dot(&block.wv.t());
            x = block_forward(block, &x, &q, &v);
        }
        Ok(x)
    }
}

/// The block body given already-projected queries and values.
pub(crate) fn block_forward(block: &BlockWeights, x: &Array2<f64>, q: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let k = x.dot(&block.wk.t());
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let attn = softmax_rows((q.dot(&k.t()) * scale).view(), 1.0);
    let y = x + &attn.dot(v).dot(&block.wo.t());
    let hidden = y.dot(&block.w1.t()).mapv(f64::tanh);
    &y + &hidden.dot(&block.w2.t())
}

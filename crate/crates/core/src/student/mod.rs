//! The LoRA-adapted student: a frozen ViT backbone whose query and value
//! projections carry low-rank adapters, plus an optional per-location head.

pub mod checkpoint;
pub mod head;
pub mod lora;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::domain::{FeatureMap, Image};
use crate::error::{Error, Result};
use crate::features::mock_vit::BlockWeights;
use crate::features::{known_arch, BackboneArch, MockVit, ViTBackendConfig, MOCK_VIT};
use crate::util::{rng_from, softmax_rows};
pub use checkpoint::StudentCheckpoint;
pub use head::{HeadGrad, LinearHead};
pub use lora::{LoraGrad, LoraLayer};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_LORA_DROPOUT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

/// Trainable adapter parameters for `blocks` blocks of width `dim`, adapting
/// query and value (square `dim x dim`) projections at `rank`.
pub fn lora_param_count(arch: &BackboneArch, rank: usize) -> usize {
    arch.blocks * 2 * rank * (arch.dim + arch.dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters {
    pub query: LoraLayer,
    pub value: LoraLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub backbone_id: String,
    pub backbone: MockVit,
    pub vit_cfg: ViTBackendConfig,
    pub adapters: Vec<BlockAdapters>,
    pub head: Option<LinearHead>,
    pub rank: usize,
    pub lora_dropout: f64,
}

/// Intermediate values of one block, kept for backward.
#[derive(Debug, Clone)]
struct BlockTrace {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    hidden: Array2<f64>,
    q_trace: lora::LoraTrace,
    v_trace: lora::LoraTrace,
}

#[derive(Debug, Clone)]
pub struct StudentTrace {
    blocks: Vec<BlockTrace>,
    head: Option<head::HeadTrace>,
}

/// Gradients in the same order as [`StudentModel::trainable_tensors_mut`].
#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub adapters: Vec<(LoraGrad, LoraGrad)>,
    pub head: Option<HeadGrad>,
}

impl StudentGrads {
    pub fn tensors(&self, adapters: bool, head: bool) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        if adapters {
            for (q, v) in &self.adapters {
                out.extend([&q.a, &q.b, &v.a, &v.b]);
            }
        }
        if head {
            if let Some(h) = &self.head {
                out.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
            }
        }
        out
    }

    /// Accumulates `other` into `self`.
    pub fn add(&mut self, other: &StudentGrads) {
        for ((q, v), (oq, ov)) in self.adapters.iter_mut().zip(&other.adapters) {
            q.a += &oq.a;
            q.b += &oq.b;
            v.a += &ov.a;
            v.b += &ov.b;
        }
        if let (Some(h), Some(o)) = (self.head.as_mut(), other.head.as_ref()) {
            h.w1 += &o.w1;
            h.b1 += &o.b1;
            h.w2 += &o.w2;
            h.b2 += &o.b2;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (q, v) in &mut self.adapters {
            q.a *= s;
            q.b *= s;
            v.a *= s;
            v.b *= s;
        }
        if let Some(h) = &mut self.head {
            h.w1 *= s;
            h.b1 *= s;
            h.w2 *= s;
            h.b2 *= s;
        }
    }
}

impl StudentModel {
    /// Wraps every block's query and value projection of the backbone named
    /// by `vit_cfg` with rank-`rank` adapters. All backbone weights stay frozen.
    pub fn inject_lora(vit_cfg: &ViTBackendConfig, rank: usize, dropout: f64, seed: u64) -> Result<Self> {
        match vit_cfg.backend_id.as_str() {
            MOCK_VIT => {}
            other if known_arch(other).is_some() => return Err(Error::BackendUnavailable(other.to_string())),
            other => return Err(Error::UnsupportedBackbone(other.to_string())),
        }
        vit_cfg.validate()?;
        let backbone = MockVit::new(vit_cfg.mock_config())?;
        let mut rng = rng_from(&["lora-init", &seed.to_string()]);
        let adapters = backbone
            .blocks
            .iter()
            .map(|b| {
                Ok(BlockAdapters {
                    query: LoraLayer::new(b.wq.clone(), rank, dropout, &mut rng)?,
                    value: LoraLayer::new(b.wv.clone(), rank, dropout, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone_id: vit_cfg.backend_id.clone(),
            backbone,
            vit_cfg: vit_cfg.clone(),
            adapters,
            head: None,
            rank,
            lora_dropout: dropout,
        })
    }

    pub fn extraction_layer(&self) -> usize {
        self.vit_cfg.layer
    }

    pub fn adapted_layers(&self) -> Vec<(usize, Projection)> {
        (0..self.adapters.len()).flat_map(|b| [(b, Projection::Query), (b, Projection::Value)]).collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.query.trainable_params() + a.value.trainable_params()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapter_param_count() + self.head.as_ref().map_or(0, LinearHead::param_count)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.as_ref().map_or(self.vit_cfg.feature_dim, LinearHead::out_dim)
    }

    /// Adds an identity-initialised two-layer head of hidden `width`.
    pub fn attach_head(&mut self, width: usize, dropout: f64, seed: u64) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::HeadAlreadyPresent);
        }
        let mut rng = rng_from(&["head-init", &seed.to_string()]);
        let d = self.vit_cfg.feature_dim;
        self.head = Some(LinearHead::new(d, width, d, dropout, &mut rng)?);
        Ok(())
    }

    pub fn set_head_dropout(&mut self, rate: f64) {
        if let Some(h) = &mut self.head {
            h.dropout_rate = rate;
        }
    }

    pub fn set_lora_dropout(&mut self, rate: f64) {
        self.lora_dropout = rate;
        for a in &mut self.adapters {
            a.query.dropout_rate = rate;
            a.value.dropout_rate = rate;
        }
    }

    /// Raw (unnormalized) per-location features as an `N x D` matrix, plus the
    /// grid. With `rng`, dropout is active (training mode).
    pub fn forward_traced(&self, image: &Image, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Array2<f64>, (usize, usize), StudentTrace)> {
        let resized = image.resize(self.vit_cfg.input_size[0], self.vit_cfg.input_size[1]);
        let (patches, grid) = self.backbone.patchify(&resized)?;
        let mut x = self.backbone.embed_patches(&patches);
        let mut blocks = Vec::with_capacity(self.vit_cfg.layer + 1);
        for (weights, adapters) in self.backbone.blocks.iter().zip(&self.adapters).take(self.vit_cfg.layer + 1) {
            let (q, q_trace) = adapters.query.forward_traced(&x, rng.as_deref_mut())?;
            let (v, v_trace) = adapters.value.forward_traced(&x, rng.as_deref_mut())?;
            let k = x.dot(&weights.wk.t());
            let scale = 1.0 / (q.ncols() as f64).sqrt();
            let attn = softmax_rows((q.dot(&k.t()) * scale).view(), 1.0);
            let y = &x + &attn.dot(&v).dot(&weights.wo.t());
            let hidden = y.dot(&weights.w1.t()).mapv(f64::tanh);
            let out = &y + &hidden.dot(&weights.w2.t());
            blocks.push(BlockTrace { q, k, v, attn, hidden, q_trace, v_trace });
            x = out;
        }
        let (features, head) = match &self.head {
            Some(h) => {
                let (y, t) = h.forward_traced(&x, rng.as_deref_mut())?;
                (y, Some(t))
            }
            None => (x, None),
        };
        Ok((features, grid, StudentTrace { blocks, head }))
    }

    /// Eval-mode feature map (no dropout), unnormalized.
    pub fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let (features, grid, _) = self.forward_traced(image, None)?;
        FeatureMap::from_matrix(&features, grid, image.size())
    }

    /// Eval-mode extraction of several images at once. Token rows of the
    /// whole batch go through each projection together; attention stays
    /// per image. Matches `extract` image by image.
    pub fn extract_batch(&self, images: &[Image]) -> Result<Vec<FeatureMap>> {
        let [ih, iw] = self.vit_cfg.input_size;
        let mut grids = Vec::with_capacity(images.len());
        let mut stacked = Vec::with_capacity(images.len());
        for image in images {
            let (patches, grid) = self.backbone.patchify(&image.resize(ih, iw))?;
            grids.push(grid);
            stacked.push(patches);
        }
        if stacked.is_empty() {
            return Ok(vec![]);
        }
        let views: Vec<_> = stacked.iter().map(|p| p.view()).collect();
        let patches = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let n = grids[0].0 * grids[0].1;
        let mut x = self.backbone.embed_patches(&patches);
        for (weights, adapters) in self.backbone.blocks.iter().zip(&self.adapters).take(self.vit_cfg.layer + 1) {
            let q = adapters.query.forward(&x)?;
            let v = adapters.value.forward(&x)?;
            let k = x.dot(&weights.wk.t());
            let scale = 1.0 / (q.ncols() as f64).sqrt();
            let mut mixed = Array2::zeros(x.dim());
            for b in 0..images.len() {
                let rows = ndarray::s![b * n..(b + 1) * n, ..];
                let attn = softmax_rows((q.slice(rows).dot(&k.slice(rows).t()) * scale).view(), 1.0);
                mixed.slice_mut(rows).assign(&attn.dot(&v.slice(rows)));
            }
            let y = &x + &mixed.dot(&weights.wo.t());
            let hidden = y.dot(&weights.w1.t()).mapv(f64::tanh);
            x = &y + &hidden.dot(&weights.w2.t());
        }
        if let Some(h) = &self.head {
            x = h.forward(&x)?;
        }
        images
            .iter()
            .enumerate()
            .map(|(b, image)| FeatureMap::from_matrix(&x.slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned(), grids[b], image.size()))
            .collect()
    }

    /// Backpropagates `d_features` (same shape as the forward output).
    pub fn backward(&self, trace: &StudentTrace, d_features: &Array2<f64>) -> StudentGrads {
        let (mut dz, head) = match (&self.head, &trace.head) {
            (Some(h), Some(t)) => {
                let (dx, g) = h.backward(t, d_features);
                (dx, Some(g))
            }
            _ => (d_features.clone(), None),
        };
        let mut adapters: Vec<(LoraGrad, LoraGrad)> = self
            .adapters
            .iter()
            .map(|a| {
                let zero = |l: &LoraLayer| LoraGrad { a: Array2::zeros(l.a.dim()), b: Array2::zeros(l.b.dim()) };
                (zero(&a.query), zero(&a.value))
            })
            .collect();
        for (i, t) in trace.blocks.iter().enumerate().rev() {
            let w: &BlockWeights = &self.backbone.blocks[i];
            let ad = &self.adapters[i];
            let scale = 1.0 / (t.q.ncols() as f64).sqrt();
            // z = y + tanh(y W1ᵀ) W2ᵀ
            let d_hidden = dz.dot(&w.w2) * &t.hidden.mapv(|h| 1.0 - h * h);
            let dy = &dz + &d_hidden.dot(&w.w1);
            // y = x + (attn v) Woᵀ
            let d_o = dy.dot(&w.wo);
            let d_attn = d_o.dot(&t.v.t());
            let dv = t.attn.t().dot(&d_o);
            let mut ds = &t.attn * &d_attn;
            for (mut row, a_row) in ds.rows_mut().into_iter().zip(t.attn.rows()) {
                let s = row.sum();
                row.zip_mut_with(&a_row, |d, a| *d -= a * s);
            }
            let dq = ds.dot(&t.k) * scale;
            let dk = ds.t().dot(&t.q) * scale;
            let (dx_q, gq) = ad.query.backward(&t.q_trace, &dq);
            let (dx_v, gv) = ad.value.backward(&t.v_trace, &dv);
            dz = dy + dk.dot(&w.wk) + dx_q + dx_v;
            adapters[i] = (gq, gv);
        }
        StudentGrads { adapters, head }
    }

    /// Mutable trainable tensors, ordered like [`StudentGrads::tensors`].
    pub fn trainable_tensors_mut(&mut self, adapters: bool, head: bool) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        if adapters {
            for a in &mut self.adapters {
                out.extend([&mut a.query.a, &mut a.query.b, &mut a.value.a, &mut a.value.b]);
            }
        }
        if head {
            if let Some(h) = &mut self.head {
                out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
            }
        }
        out
    }

    /// Folds every adapter into its frozen weight, returning a plain backbone.
    pub fn merge_lora(&self) -> MockVit {
        let mut merged = self.backbone.clone();
        for (block, ad) in merged.blocks.iter_mut().zip(&self.adapters) {
            block.wq = ad.query.merged_weight();
            block.wv = ad.value.merged_weight();
        }
        merged
    }

    /// SHA-256 over the frozen backbone weights.
    pub fn backbone_fingerprint(&self) -> String {
        backbone_fingerprint(&self.backbone)
    }
}

pub fn backbone_fingerprint(vit: &MockVit) -> String {
    let mut h = Sha256::new();
    let mut feed = |m: &Array2<f64>| {
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    };
    feed(&vit.patch_embed);
    for b in &vit.blocks {
        for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
            feed(m);
        }
    }
    hex::encode(h.finalize())
}

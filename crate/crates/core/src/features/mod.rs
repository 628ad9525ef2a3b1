//! Teacher and student feature extraction behind a uniform backend interface,
//! timestep ensembling, teacher fusion and the on-disk feature cache.

pub mod cache;
pub mod mock_diffusion;
pub mod mock_vit;

use ndarray::{concatenate, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureMap, Image};
use crate::error::{Error, Result};
pub use cache::{CacheKey, FeatureCache};
pub use mock_diffusion::MockDiffusion;
pub use mock_vit::{MockVit, MockVitConfig};

pub const MOCK_VIT: &str = "mock-vit";
pub const MOCK_DIFFUSION: &str = "mock-diffusion";

/// Architecture facts about a ViT backbone, known even when its weights are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneArch {
    pub patch_size: usize,
    pub blocks: usize,
    pub dim: usize,
}

/// Architectures of the real backbones this crate knows by name.
pub fn known_arch(backend_id: &str) -> Option<BackboneArch> {
    match backend_id {
        "dinov2-b14" | "dinov2-b14-registers" => Some(BackboneArch { patch_size: 14, blocks: 12, dim: 768 }),
        "dinov2-s14" | "dinov2-s14-registers" => Some(BackboneArch { patch_size: 14, blocks: 12, dim: 384 }),
        "dinov2-l14" | "dinov2-l14-registers" => Some(BackboneArch { patch_size: 14, blocks: 24, dim: 1024 }),
        _ => None,
    }
}

fn default_vit_id() -> String {
    MOCK_VIT.into()
}
fn default_patch() -> usize {
    14
}
fn default_blocks() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTBackendConfig {
    #[serde(default = "default_vit_id")]
    pub backend_id: String,
    pub layer: usize,
    /// `[height, width]` the image is resized to before extraction.
    pub input_size: [usize; 2],
    pub feature_dim: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Mock-only: number of blocks to instantiate.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ViTBackendConfig {
    fn default() -> Self {
        Self {
            backend_id: "dinov2-b14-registers".into(),
            layer: 11,
            input_size: [434, 434],
            feature_dim: 768,
            patch_size: 14,
            blocks: 12,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ViTBackendConfig {
    /// Small mock configuration with an 8x8 grid over 64x64 inputs.
    pub fn mock_small() -> Self {
        Self {
            backend_id: MOCK_VIT.into(),
            layer: 1,
            input_size: [64, 64],
            feature_dim: 32,
            patch_size: 8,
            blocks: 2,
            mlp_ratio: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size[0] % self.patch_size != 0 || self.input_size[1] % self.patch_size != 0 {
            return Err(Error::ConfigInvalid(format!(
                "input size {:?} must be divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.layer >= self.blocks {
            return Err(Error::ConfigInvalid(format!("layer {} >= blocks {}", self.layer, self.blocks)));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_size[0] / self.patch_size, self.input_size[1] / self.patch_size)
    }

    pub fn mock_config(&self) -> MockVitConfig {
        MockVitConfig {
            patch_size: self.patch_size,
            dim: self.feature_dim,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            seed: self.seed,
        }
    }
}

fn default_diff_id() -> String {
    MOCK_DIFFUSION.into()
}
fn default_prompt() -> String {
    "a photo of a [category]".into()
}
fn default_stride() -> usize {
    32
}
fn default_noise_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionBackendConfig {
    #[serde(default = "default_diff_id")]
    pub backend_id: String,
    pub layer: usize,
    pub input_size: [usize; 2],
    pub timesteps: Vec<u32>,
    #[serde(default = "default_prompt")]
    pub prompt_template: String,
    pub feature_dim: usize,
    /// Mock-only: input pixels per output cell.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DiffusionBackendConfig {
    fn default() -> Self {
        Self {
            backend_id: "sdxl-turbo".into(),
            layer: 1,
            input_size: [980, 980],
            timesteps: vec![51, 101, 151, 201],
            prompt_template: default_prompt(),
            feature_dim: 1280,
            stride: 32,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl DiffusionBackendConfig {
    pub fn mock_small() -> Self {
        Self {
            backend_id: MOCK_DIFFUSION.into(),
            layer: 1,
            input_size: [128, 128],
            timesteps: vec![51, 101, 151, 201],
            prompt_template: default_prompt(),
            feature_dim: 48,
            stride: 16,
            noise_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self, max_timestep: u32) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::ConfigInvalid("timesteps must not be empty".into()));
        }
        if self.timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid(format!("timesteps {:?} must be strictly increasing", self.timesteps)));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= max_timestep) {
            return Err(Error::InvalidTimestep { timestep: t, max: max_timestep });
        }
        Ok(())
    }

    /// Prompt with `[category]` substituted; uncategorised images get "object".
    pub fn prompt_for(&self, image: &Image) -> String {
        self.prompt_template.replace("[category]", image.category().unwrap_or("object"))
    }
}

/// A dense ViT-style feature extractor.
pub trait VitBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Feature map for `image` resized to `cfg.input_size`; the map describes
    /// the original image size.
    fn extract(&self, image: &Image, cfg: &ViTBackendConfig) -> Result<FeatureMap>;
    /// Global unit-norm embedding of the image.
    fn embed(&self, image: &Image, cfg: &ViTBackendConfig) -> Result<Vec<f32>>;
}

/// A diffusion-model feature extractor queried at a noising timestep.
pub trait DiffusionBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn max_timestep(&self) -> u32;
    fn param_count(&self) -> usize;
    fn extract(&self, image: &Image, timestep: u32, cfg: &DiffusionBackendConfig) -> Result<FeatureMap>;
}

impl VitBackend for MockVit {
    fn backend_id(&self) -> &str {
        MOCK_VIT
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn param_count(&self) -> usize {
        MockVit::param_count(self)
    }

    fn extract(&self, image: &Image, cfg: &ViTBackendConfig) -> Result<FeatureMap> {
        let resized = image.resize(cfg.input_size[0], cfg.input_size[1]);
        let (patches, grid) = self.patchify(&resized)?;
        if grid != cfg.grid() {
            return Err(Error::ShapeMismatch(format!("backend grid {grid:?} vs expected {:?}", cfg.grid())));
        }
        let tokens = self.forward(&patches, cfg.layer)?;
        FeatureMap::from_matrix(&tokens, grid, image.size())
    }

    fn embed(&self, image: &Image, cfg: &ViTBackendConfig) -> Result<Vec<f32>> {
        // no class token: mean-pool the final tokens
        let resized = image.resize(cfg.input_size[0], cfg.input_size[1]);
        let (patches, _) = self.patchify(&resized)?;
        let tokens = self.forward(&patches, self.blocks.len() - 1)?;
        let mean = tokens.mean_axis(Axis(0)).expect("at least one token");
        let norm = mean.dot(&mean).sqrt();
        if norm < crate::domain::MIN_DESCRIPTOR_NORM {
            return Err(Error::ZeroDescriptor { row: 0, col: 0 });
        }
        Ok(mean.iter().map(|v| (v / norm) as f32).collect())
    }
}

impl DiffusionBackend for MockDiffusion {
    fn backend_id(&self) -> &str {
        MOCK_DIFFUSION
    }

    fn max_timestep(&self) -> u32 {
        MockDiffusion::max_timestep(self)
    }

    fn param_count(&self) -> usize {
        MockDiffusion::param_count(self)
    }

    fn extract(&self, image: &Image, timestep: u32, cfg: &DiffusionBackendConfig) -> Result<FeatureMap> {
        let resized = image.resize(cfg.input_size[0], cfg.input_size[1]);
        MockDiffusion::extract(self, &resized, timestep, &cfg.prompt_for(image), image.size())
    }
}

/// Instantiates the ViT backend named by `cfg`. Only the in-tree mock ships
/// with weights; known real architectures report `BackendUnavailable`.
pub fn load_vit(cfg: &ViTBackendConfig) -> Result<Box<dyn VitBackend>> {
    cfg.validate()?;
    match cfg.backend_id.as_str() {
        MOCK_VIT => Ok(Box::new(MockVit::new(cfg.mock_config())?)),
        other => Err(Error::BackendUnavailable(other.to_string())),
    }
}

pub fn load_diffusion(cfg: &DiffusionBackendConfig) -> Result<Box<dyn DiffusionBackend>> {
    let backend: Box<dyn DiffusionBackend> = match cfg.backend_id.as_str() {
        MOCK_DIFFUSION => Box::new(MockDiffusion::new(cfg.feature_dim, cfg.stride, cfg.layer, cfg.noise_scale, cfg.seed)?),
        other => return Err(Error::BackendUnavailable(other.to_string())),
    };
    cfg.validate(backend.max_timestep())?;
    Ok(backend)
}

pub fn extract_vit(backend: &dyn VitBackend, image: &Image, cfg: &ViTBackendConfig) -> Result<FeatureMap> {
    backend.extract(image, cfg)
}

pub fn extract_diffusion(
    backend: &dyn DiffusionBackend,
    image: &Image,
    timestep: u32,
    cfg: &DiffusionBackendConfig,
) -> Result<FeatureMap> {
    if timestep >= backend.max_timestep() {
        return Err(Error::InvalidTimestep { timestep, max: backend.max_timestep() });
    }
    backend.extract(image, timestep, cfg)
}

/// Element-wise mean of equally shaped maps.
pub fn ensemble_timesteps(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps.first().ok_or(Error::EmptyList("ensemble_timesteps needs at least one map"))?;
    let shape = first.data().dim();
    let mut sum = Array3::<f64>::zeros(shape);
    for m in maps {
        if m.data().dim() != shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", m.data().dim(), shape)));
        }
        sum.zip_mut_with(m.data(), |a, b| *a += f64::from(*b));
    }
    let n = maps.len() as f64;
    FeatureMap::new(sum.mapv(|v| (v / n) as f32), first.image_size())
}

/// Depth-concatenates two per-location normalized maps and renormalizes, so
/// each half carries weight `1/sqrt(2)`.
pub fn fuse_teachers(vit: &FeatureMap, diff: &FeatureMap) -> Result<FeatureMap> {
    if vit.grid() != diff.grid() {
        return Err(Error::GridMismatch { left: vit.grid(), right: diff.grid() });
    }
    if !vit.is_normalized() || !diff.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let data = concatenate(Axis(2), &[vit.data().view(), diff.data().view()]).expect("grids checked");
    FeatureMap::new(data, vit.image_size())?.l2_normalize()
}

/// The two frozen teachers plus their configurations.
pub struct Teachers {
    pub vit: Box<dyn VitBackend>,
    pub vit_cfg: ViTBackendConfig,
    pub diffusion: Box<dyn DiffusionBackend>,
    pub diffusion_cfg: DiffusionBackendConfig,
}

impl Teachers {
    pub fn load(vit_cfg: &ViTBackendConfig, diffusion_cfg: &DiffusionBackendConfig) -> Result<Self> {
        Ok(Self {
            vit: load_vit(vit_cfg)?,
            vit_cfg: vit_cfg.clone(),
            diffusion: load_diffusion(diffusion_cfg)?,
            diffusion_cfg: diffusion_cfg.clone(),
        })
    }

    /// Timestep-averaged raw diffusion features, normalized afterwards.
    pub fn diffusion_features(&self, image: &Image) -> Result<FeatureMap> {
        let maps = self
            .diffusion_cfg
            .timesteps
            .iter()
            .map(|&t| extract_diffusion(self.diffusion.as_ref(), image, t, &self.diffusion_cfg))
            .collect::<Result<Vec<_>>>()?;
        ensemble_timesteps(&maps)?.l2_normalize()
    }

    /// Fused, normalized teacher map for one image.
    pub fn fused(&self, image: &Image) -> Result<FeatureMap> {
        let vit = extract_vit(self.vit.as_ref(), image, &self.vit_cfg)?.l2_normalize()?;
        let diff = self.diffusion_features(image)?;
        fuse_teachers(&vit, &diff)
    }

    /// Like [`Teachers::fused`] but reading through and filling `cache`.
    pub fn fused_cached(&self, image: &Image, cache: &FeatureCache) -> Result<FeatureMap> {
        let key = CacheKey::fused(image.id(), &self.vit_cfg, &self.diffusion_cfg);
        if let Some(hit) = cache.get(&key)? {
            return Ok(hit);
        }
        let fm = self.fused(image)?;
        cache.put(&key, &fm)?;
        Ok(fm)
    }

    pub fn param_count(&self) -> usize {
        self.vit.param_count() + self.diffusion.param_count()
    }
}

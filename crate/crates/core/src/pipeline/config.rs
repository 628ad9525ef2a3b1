//! Run configuration: one TOML file, layered over defaults, plus dotted
//! `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{MatchConfig, PckReference};
use crate::features::{DiffusionBackendConfig, ViTBackendConfig};
use crate::geom3d::Geom3DConfig;
use crate::objectives::{DEFAULT_KERNEL_SIZE, DEFAULT_POINTS_PER_PAIR, DEFAULT_TAU};
use crate::pairing::PairStrategy;
use crate::student::{DEFAULT_LORA_DROPOUT, DEFAULT_RANK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub rank: usize,
    pub lora_dropout: f64,
    /// Hidden width of the supervised head; the feature dim when absent.
    pub head_width: Option<usize>,
    pub head_dropout_start: f64,
    pub head_dropout_end: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { rank: DEFAULT_RANK, lora_dropout: DEFAULT_LORA_DROPOUT, head_width: None, head_dropout_start: 0.05, head_dropout_end: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub step_epochs: usize,
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { step_epochs: 10, factor: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub kernel_size: usize,
    pub points_per_pair: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, kernel_size: DEFAULT_KERNEL_SIZE, points_per_pair: DEFAULT_POINTS_PER_PAIR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; the number of training images when absent.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub probe_fraction: f64,
    pub probe_max_pairs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { epochs: 40, steps_per_epoch: None, batch_size: 1, probe_fraction: 0.1, probe_max_pairs: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Finetune3DConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Every `holdout_every`-th frame (offset `holdout_every - 1`) is held out.
    pub holdout_every: usize,
    pub eval_pairs: usize,
    pub eval_alpha: f64,
}

impl Default for Finetune3DConfig {
    fn default() -> Self {
        Self { epochs: 10, steps_per_epoch: 50, batch_size: 1, holdout_every: 2, eval_pairs: 16, eval_alpha: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_adapters: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 1, train_adapters: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub reference: PckReference,
    pub features: FeatureSource,
    pub overlays: bool,
    pub max_overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alphas: vec![0.1], reference: PckReference::Bbox, features: FeatureSource::Student, overlays: true, max_overlays: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub images: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { images: 8, batch_size: 1, warmup: 2, repetitions: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Generated images, annotated cube pairs, or cube orbits, by stage.
    Synthetic,
    /// JSON-lines image manifest.
    Images,
    /// Directory of COCO images; a seeded random subset of `count`.
    Coco,
    /// JSON-lines pair manifest.
    Pairs,
    Spair,
    Willow,
    Cub,
    /// JSON-lines multi-view frame manifest.
    Multiview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub split: String,
    /// Image count (synthetic images, COCO subset) or pair count (synthetic pairs).
    pub count: usize,
    /// Synthetic image size `[height, width]`.
    pub image_size: [usize; 2],
    /// Synthetic orbit: number of sequences and frames per sequence.
    pub sequences: usize,
    pub frames: usize,
    /// Keypoints per synthetic annotated pair.
    pub keypoints_per_pair: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            path: None,
            split: "test".into(),
            count: 12_000,
            image_size: [64, 64],
            sequences: 1,
            frames: 20,
            keypoints_per_pair: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub device: String,
    /// Starting student checkpoint (JSON); a fresh student when absent.
    pub checkpoint: Option<PathBuf>,
    pub vit: ViTBackendConfig,
    pub diffusion: DiffusionBackendConfig,
    pub student: StudentConfig,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub loss: LossConfig,
    pub distill: DistillConfig,
    pub finetune3d: Finetune3DConfig,
    pub supervised: SupervisedConfig,
    pub geom3d: Geom3DConfig,
    pub pairing: PairStrategy,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            checkpoint: None,
            vit: ViTBackendConfig::default(),
            diffusion: DiffusionBackendConfig::default(),
            student: StudentConfig::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            loss: LossConfig::default(),
            distill: DistillConfig::default(),
            finetune3d: Finetune3DConfig::default(),
            supervised: SupervisedConfig::default(),
            geom3d: Geom3DConfig::default(),
            pairing: PairStrategy::default(),
            matching: MatchConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl TrainConfig {
    /// Small mock backbones with matching 8x8 teacher grids.
    pub fn mock() -> Self {
        Self { vit: ViTBackendConfig::mock_small(), diffusion: DiffusionBackendConfig::mock_small(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(invalid(format!("optimizer.lr {} must be positive", o.lr)));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(invalid("optimizer betas must lie in [0, 1), weight_decay >= 0, eps > 0"));
        }
        if self.scheduler.step_epochs == 0 || !(self.scheduler.factor > 0.0) {
            return Err(invalid("scheduler.step_epochs and scheduler.factor must be positive"));
        }
        for (name, epochs) in [("distill", self.distill.epochs), ("finetune3d", self.finetune3d.epochs), ("supervised", self.supervised.epochs)] {
            if epochs == 0 {
                return Err(invalid(format!("{name}.epochs must be at least 1")));
            }
        }
        if self.distill.batch_size == 0 || self.finetune3d.batch_size == 0 || self.supervised.batch_size == 0 {
            return Err(invalid("batch sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.distill.probe_fraction) {
            return Err(invalid("distill.probe_fraction must lie in [0, 1)"));
        }
        if self.finetune3d.holdout_every < 2 {
            return Err(invalid("finetune3d.holdout_every must be at least 2"));
        }
        if !(self.loss.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.loss.tau));
        }
        if self.loss.kernel_size % 2 == 0 {
            return Err(Error::EvenKernel(self.loss.kernel_size));
        }
        if self.eval.alphas.is_empty() || self.eval.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(invalid("eval.alphas must be non-empty values in (0, 1]"));
        }
        for p in [self.student.lora_dropout, self.student.head_dropout_start, self.student.head_dropout_end] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid(format!("dropout {p} must lie in [0, 1)")));
            }
        }
        self.vit.validate()?;
        self.geom3d.validate()?;
        self.pairing.validate()?;
        self.matching.validate()
    }

    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(TrainConfig::default()).map_err(|e| Error::parse("default config", e))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Table = text.parse().map_err(|e| Error::parse(path.display().to_string(), e))?;
            merge(&mut tree, user);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(tree).try_into().map_err(|e| invalid(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("config", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| invalid(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = tree;
    for part in &path[..path.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(invalid(format!("override `{key}`: `{part}` is not a table"))),
        };
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

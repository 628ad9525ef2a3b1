//! Distillation of fused ViT + diffusion correspondence features into a single
//! LoRA-adapted student, with a 3D reprojection fine-tuning path and a
//! matching/evaluation stack.

pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom3d;
pub mod manifest;
pub mod objectives;
pub mod pairing;
pub mod pipeline;
pub mod student;
pub mod util;

pub use domain::{BoundingBox, CorrespondencePair, FeatureMap, Image, Keypoint, SimilarityMap};
pub use error::{Error, Result};

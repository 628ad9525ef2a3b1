//! Dense correspondences from posed RGB-D frames.
//!
//! Cameras are pinhole with world-from-camera extrinsics, `+z` forward, `+x`
//! right and `+y` down. Screen coordinates are pixel indices: pixel `(c, r)`
//! has its centre at `x = c, y = r`. Depth is the camera-frame `z`.

pub mod manifest;
pub mod synthetic;

use log::debug;
use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{image_to_grid, Image, Keypoint};
use crate::error::{Error, Result};
use crate::objectives::{gaussian_targets, CorrespondenceMap};

const MIN_CAMERA_Z: f64 = 1e-9;

/// Intrinsics and world-from-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    intrinsics_inv: Matrix3<f64>,
    camera_from_world: Matrix4<f64>,
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, extrinsics: Matrix4<f64>) -> Result<Self> {
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(Error::InvalidValue("focal lengths must be positive".into()));
        }
        let rot = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if ortho > 1e-5 || (rot.determinant() - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidValue("extrinsics rotation must be orthonormal with det +1".into()));
        }
        let bottom = extrinsics.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > 1e-12 {
            return Err(Error::InvalidValue("extrinsics bottom row must be [0 0 0 1]".into()));
        }
        let intrinsics_inv = intrinsics.try_inverse().ok_or_else(|| Error::InvalidValue("singular intrinsics".into()))?;
        let t = extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
        let mut camera_from_world = Matrix4::identity();
        camera_from_world.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot.transpose());
        camera_from_world.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rot.transpose() * t));
        Ok(Self { intrinsics, extrinsics, intrinsics_inv, camera_from_world })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn camera_from_world(&self) -> &Matrix4<f64> {
        &self.camera_from_world
    }

    pub fn centre(&self) -> Point3<f64> {
        Point3::from(self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// World-space direction of the ray through a screen point (not normalized).
    pub fn ray_direction(&self, x: f64, y: f64) -> Vector3<f64> {
        let cam = self.intrinsics_inv * Vector3::new(x, y, 1.0);
        self.extrinsics.fixed_view::<3, 3>(0, 0) * cam
    }
}

/// Back-projects a screen point at camera-frame depth `depth` into the world.
pub fn screen_to_world(x: f64, y: f64, depth: f64, cam: &Camera) -> Result<Point3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidDepth(depth));
    }
    let c = cam.intrinsics_inv * Vector3::new(x, y, 1.0) * depth;
    Ok(cam.extrinsics.transform_point(&Point3::from(c)))
}

/// Projects a world point, returning `(x, y, camera-frame depth)`.
pub fn world_to_screen(w: &Point3<f64>, cam: &Camera) -> Result<(f64, f64, f64)> {
    let c = cam.camera_from_world.transform_point(w);
    if c.z <= MIN_CAMERA_Z {
        return Err(Error::BehindCamera(c.z));
    }
    let p = cam.intrinsics * (c.coords / c.z);
    Ok((p.x, p.y, c.z))
}

/// One posed RGB-D frame.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub image: Image,
    /// `H x W`; 0 marks invalid depth.
    pub depth: Array2<f64>,
    pub camera: Camera,
    pub foreground_mask: Option<Array2<bool>>,
}

impl CameraView {
    pub fn new(image: Image, depth: Array2<f64>, camera: Camera, foreground_mask: Option<Array2<bool>>) -> Result<Self> {
        let size = image.size();
        if depth.dim() != size {
            return Err(Error::ShapeMismatch(format!("depth {:?} vs image {:?}", depth.dim(), size)));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidValue("depth must be finite and non-negative".into()));
        }
        if let Some(m) = &foreground_mask {
            if m.dim() != size {
                return Err(Error::ShapeMismatch(format!("mask {:?} vs image {:?}", m.dim(), size)));
            }
        }
        Ok(Self { image, depth, camera, foreground_mask })
    }

    pub fn size(&self) -> (usize, usize) {
        self.depth.dim()
    }

    pub fn is_foreground(&self, r: usize, c: usize) -> bool {
        self.foreground_mask.as_ref().is_none_or(|m| m[[r, c]])
    }
}

/// Nearest pixel `(row, col)` for a screen point, if inside the image.
pub fn nearest_pixel(x: f64, y: f64, size: (usize, usize)) -> Option<(usize, usize)> {
    let (c, r) = ((x + 0.5).floor(), (y + 0.5).floor());
    (c >= 0.0 && r >= 0.0 && c < size.1 as f64 && r < size.0 as f64).then_some((r as usize, c as usize))
}

/// Source pixels expressed in the target screen.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFrame {
    /// `H x W x 2`, `(x, y)` in the target screen.
    pub coords: Array3<f64>,
    pub projected_depth: Array2<f64>,
    /// Source depth valid, in front of the target camera, and inside its image.
    pub valid: Array2<bool>,
    pub target_size: (usize, usize),
}

pub fn project_frame(src: &CameraView, tgt: &CameraView) -> ProjectedFrame {
    let (h, w) = src.size();
    let mut coords = Array3::from_elem((h, w, 2), f64::NAN);
    let mut projected_depth = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let transform = tgt.camera.camera_from_world * src.camera.extrinsics;
    for r in 0..h {
        for c in 0..w {
            let d = src.depth[[r, c]];
            if d <= 0.0 {
                continue;
            }
            let cam_src = src.camera.intrinsics_inv * Vector3::new(c as f64, r as f64, 1.0) * d;
            let cam_tgt = transform.transform_point(&Point3::from(cam_src));
            if cam_tgt.z <= MIN_CAMERA_Z {
                continue;
            }
            let p = tgt.camera.intrinsics * (cam_tgt.coords / cam_tgt.z);
            coords[[r, c, 0]] = p.x;
            coords[[r, c, 1]] = p.y;
            projected_depth[[r, c]] = cam_tgt.z;
            valid[[r, c]] = nearest_pixel(p.x, p.y, tgt.size()).is_some();
        }
    }
    ProjectedFrame { coords, projected_depth, valid, target_size: tgt.size() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub mask: Array2<bool>,
    pub epsilon: f64,
}

impl VisibilityMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }
}

/// Marks valid pixels whose projected depth agrees with the target depth at
/// the nearest target pixel to strictly within `epsilon`.
pub fn visibility(tgt_depth: &Array2<f64>, projected: &ProjectedFrame, epsilon: f64) -> VisibilityMask {
    let mask = Array2::from_shape_fn(projected.valid.dim(), |(r, c)| {
        if !projected.valid[[r, c]] {
            return false;
        }
        let (x, y) = (projected.coords[[r, c, 0]], projected.coords[[r, c, 1]]);
        match nearest_pixel(x, y, tgt_depth.dim()) {
            Some((tr, tc)) => {
                let d2 = tgt_depth[[tr, tc]];
                d2 > 0.0 && (d2 - projected.projected_depth[[r, c]]).abs() < epsilon
            }
            None => false,
        }
    });
    VisibilityMask { mask, epsilon }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geom3DConfig {
    pub epsilon: f64,
    pub min_gap: usize,
    pub max_gap: usize,
    pub min_overlap: f64,
    pub points_per_pair: usize,
    pub kernel_size: usize,
    pub use_foreground_mask: bool,
}

impl Default for Geom3DConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            min_gap: 5,
            max_gap: 30,
            min_overlap: 0.05,
            points_per_pair: 256,
            kernel_size: 7,
            use_foreground_mask: true,
        }
    }
}

impl Geom3DConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::ConfigInvalid(format!("geom3d.epsilon {} must be positive", self.epsilon)));
        }
        if self.min_gap == 0 || self.min_gap > self.max_gap {
            return Err(Error::ConfigInvalid(format!("geom3d gap range [{}, {}] is empty", self.min_gap, self.max_gap)));
        }
        if self.points_per_pair == 0 {
            return Err(Error::ConfigInvalid("geom3d.points_per_pair must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        Ok(())
    }
}

/// Sampled correspondences between two frames of a sequence.
#[derive(Debug, Clone)]
pub struct Geom3DSample {
    pub source_frame: usize,
    pub target_frame: usize,
    pub source: Image,
    pub target: Image,
    /// Source pixel centres.
    pub source_pixels: Vec<Keypoint>,
    /// Projected (continuous) target screen points.
    pub target_pixels: Vec<Keypoint>,
    /// Source feature-grid coordinates `(gy, gx)`.
    pub source_points: Vec<(f64, f64)>,
    /// Target feature-grid coordinates `(gy, gx)`.
    pub target_points: Vec<(f64, f64)>,
    pub targets: CorrespondenceMap,
}

/// Correspondences between one source and one target frame, sampled from
/// the mutually visible (and foreground) source pixels.
pub fn sample_pair(
    views: (&CameraView, &CameraView),
    frames: (usize, usize),
    cfg: &Geom3DConfig,
    grid: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Geom3DSample> {
    let (src, tgt) = views;
    let projected = project_frame(src, tgt);
    let vis = visibility(&tgt.depth, &projected, cfg.epsilon);
    let (h, w) = src.size();
    let use_mask = cfg.use_foreground_mask;
    let mut candidates = Vec::new();
    let mut eligible = 0usize;
    for r in 0..h {
        for c in 0..w {
            if src.depth[[r, c]] <= 0.0 || (use_mask && !src.is_foreground(r, c)) {
                continue;
            }
            eligible += 1;
            if !vis.mask[[r, c]] {
                continue;
            }
            let (x, y) = (projected.coords[[r, c, 0]], projected.coords[[r, c, 1]]);
            let (tr, tc) = nearest_pixel(x, y, tgt.size()).expect("visible implies in bounds");
            if use_mask && !tgt.is_foreground(tr, tc) {
                continue;
            }
            candidates.push((r, c, x, y));
        }
    }
    let fraction = if eligible == 0 { 0.0 } else { candidates.len() as f64 / eligible as f64 };
    if candidates.is_empty() || fraction < cfg.min_overlap {
        return Err(Error::InsufficientOverlap { source_frame: frames.0, target_frame: frames.1, fraction });
    }
    let n = cfg.points_per_pair.min(candidates.len());
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), n).into_vec();
    chosen.sort_unstable();
    let mut sample_out = Geom3DSample {
        source_frame: frames.0,
        target_frame: frames.1,
        source: src.image.clone(),
        target: tgt.image.clone(),
        source_pixels: Vec::with_capacity(n),
        target_pixels: Vec::with_capacity(n),
        source_points: Vec::with_capacity(n),
        target_points: Vec::with_capacity(n),
        targets: gaussian_targets(&[], cfg.kernel_size, grid)?,
    };
    let mut cells = Vec::with_capacity(n);
    for i in chosen {
        let (r, c, x, y) = candidates[i];
        let (sgy, sgx) = image_to_grid(c as f64, r as f64, src.size(), grid);
        let (tgy, tgx) = image_to_grid(x, y, tgt.size(), grid);
        sample_out.source_pixels.push(Keypoint::new(c as f64, r as f64));
        sample_out.target_pixels.push(Keypoint::new(x, y));
        sample_out.source_points.push((sgy, sgx));
        sample_out.target_points.push((tgy, tgx));
        cells.push((nearest_cell(tgy, grid.0), nearest_cell(tgx, grid.1)));
    }
    sample_out.targets = gaussian_targets(&cells, cfg.kernel_size, grid)?.with_source_points(sample_out.source_points.clone())?;
    Ok(sample_out)
}

fn nearest_cell(g: f64, n: usize) -> i64 {
    (g.round() as i64).clamp(0, n as i64 - 1)
}

/// Samples emitted for a sequence plus the pairs that were skipped.
#[derive(Debug, Default)]
pub struct Geom3DBatch {
    pub samples: Vec<Geom3DSample>,
    pub skipped: Vec<Error>,
}

/// Frame index gap drawn uniformly from the configured range, shrunk to fit
/// short sequences.
pub fn draw_pair(len: usize, cfg: &Geom3DConfig, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    if len < 2 {
        return None;
    }
    let max_gap = cfg.max_gap.min(len - 1);
    let min_gap = cfg.min_gap.min(max_gap);
    let gap = rng.random_range(min_gap..=max_gap);
    let start = rng.random_range(0..len - gap);
    Some((start, start + gap))
}

/// Draws `pairs` frame pairs and samples each; pairs without enough mutual
/// visibility are skipped and reported.
pub fn build_3d_samples(sequence: &[CameraView], cfg: &Geom3DConfig, grid: (usize, usize), pairs: usize, rng: &mut ChaCha8Rng) -> Result<Geom3DBatch> {
    cfg.validate()?;
    let mut batch = Geom3DBatch::default();
    for _ in 0..pairs {
        let Some((a, b)) = draw_pair(sequence.len(), cfg, rng) else {
            break;
        };
        match sample_pair((&sequence[a], &sequence[b]), (a, b), cfg, grid, rng) {
            Ok(s) => batch.samples.push(s),
            Err(e @ Error::InsufficientOverlap { .. }) => {
                debug!("skipping frame pair: {e}");
                batch.skipped.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}

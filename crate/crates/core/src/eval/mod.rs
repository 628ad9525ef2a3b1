//! Keypoint matching, PCK, and small downstream utilities.

pub mod bench;
pub mod overlay;
pub mod segment;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::domain::{bilinear_sample, BoundingBox, FeatureMap, Keypoint};
use crate::error::{Error, Result};
pub use bench::{throughput_benchmark, BenchReport};
pub use segment::foreground_segmentation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub use_window_soft_argmax: bool,
    /// Window side in target-image pixels; odd.
    pub window_size: usize,
    pub soft_argmax_temperature: f64,
    pub use_pose_align: bool,
    pub flip_label_map: BTreeMap<String, String>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            use_window_soft_argmax: true,
            window_size: 15,
            soft_argmax_temperature: 0.1,
            use_pose_align: false,
            flip_label_map: BTreeMap::new(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 {
            return Err(Error::ConfigInvalid(format!("match.window_size {} must be odd", self.window_size)));
        }
        if !(self.soft_argmax_temperature > 0.0) {
            return Err(Error::NonPositiveTau(self.soft_argmax_temperature));
        }
        check_involution(&self.flip_label_map)
    }
}

fn check_involution(map: &BTreeMap<String, String>) -> Result<()> {
    for (a, b) in map {
        if map.get(b) != Some(a) {
            return Err(Error::NonInvolutionMap(format!("{a} -> {b} but {b} -> {:?}", map.get(b))));
        }
    }
    Ok(())
}

/// Cosine similarity of one descriptor against every target cell, as a
/// target-grid shaped array.
pub fn similarity_row(desc: &Array1<f64>, f_tgt: &FeatureMap) -> Array2<f64> {
    let (h, w) = f_tgt.grid();
    let data = f_tgt.data();
    Array2::from_shape_fn((h, w), |(r, c)| data.slice(ndarray::s![r, c, ..]).iter().zip(desc.iter()).map(|(a, b)| f64::from(*a) * b).sum())
}

/// First maximum in row-major order.
pub fn hard_argmax(sim: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut val = f64::NEG_INFINITY;
    for ((r, c), v) in sim.indexed_iter() {
        if *v > val {
            val = *v;
            best = (r, c);
        }
    }
    best
}

/// Normalized descriptor at an image point of a normalized map.
pub fn source_descriptor(f_src: &FeatureMap, p: &Keypoint) -> Result<Array1<f64>> {
    let d = bilinear_sample(f_src, p)?.mapv(f64::from);
    let n = d.dot(&d).sqrt();
    if n < crate::domain::MIN_DESCRIPTOR_NORM {
        return Err(Error::ZeroDescriptor { row: 0, col: 0 });
    }
    Ok(d / n)
}

pub fn match_keypoint(f_src: &FeatureMap, f_tgt: &FeatureMap, p1: &Keypoint, cfg: &MatchConfig) -> Result<Keypoint> {
    if !f_src.is_normalized() || !f_tgt.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let desc = source_descriptor(f_src, p1)?;
    let sim = similarity_row(&desc, f_tgt);
    let peak = hard_argmax(&sim);
    let mut out = if cfg.use_window_soft_argmax {
        let (x, y) = window_soft_argmax(&sim, peak, f_tgt.image_size(), cfg.window_size, cfg.soft_argmax_temperature);
        Keypoint::new(x, y)
    } else {
        f_tgt.cell_center(peak.0, peak.1)
    };
    out.label = p1.label.clone();
    Ok(out)
}

/// Keys cubic convolution kernel (`a = -0.5`).
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Bicubic sample of a grid at continuous grid coordinates, edges replicated.
pub fn bicubic_sample(grid: &Array2<f64>, gy: f64, gx: f64) -> f64 {
    let (h, w) = grid.dim();
    let (y0, x0) = (gy.floor(), gx.floor());
    let mut acc = 0.0;
    for dy in -1..=2 {
        let yy = y0 as i64 + dy;
        let wy = cubic(gy - yy as f64);
        let ry = yy.clamp(0, h as i64 - 1) as usize;
        for dx in -1..=2 {
            let xx = x0 as i64 + dx;
            let wx = cubic(gx - xx as f64);
            let rx = xx.clamp(0, w as i64 - 1) as usize;
            acc += wy * wx * grid[[ry, rx]];
        }
    }
    acc
}

/// Integer pixel range of a window of `size` pixels centred at `c` (all
/// pixels with `|x - c| <= (size - 1) / 2`), shifted to fit in `[0, n)`.
fn window_range(c: f64, size: usize, n: usize) -> (i64, i64) {
    let half = (size as f64 - 1.0) / 2.0;
    let mut lo = (c - half).ceil() as i64;
    let mut hi = (c + half).floor() as i64;
    if lo < 0 {
        hi -= lo;
        lo = 0;
    }
    if hi > n as i64 - 1 {
        lo -= hi - (n as i64 - 1);
        hi = n as i64 - 1;
    }
    (lo.max(0), hi)
}

/// Sub-pixel refinement: the similarity grid is bicubically upsampled to
/// image resolution inside a window around the peak cell centre, softmaxed
/// at `temperature`, and the expected pixel position returned as `(x, y)`.
pub fn window_soft_argmax(sim: &Array2<f64>, peak: (usize, usize), image_size: (usize, usize), window: usize, temperature: f64) -> (f64, f64) {
    let (gh, gw) = sim.dim();
    let (ih, iw) = image_size;
    let (sy, sx) = (ih as f64 / gh as f64, iw as f64 / gw as f64);
    let cy = (peak.0 as f64 + 0.5) * sy - 0.5;
    let cx = (peak.1 as f64 + 0.5) * sx - 0.5;
    let (y_lo, y_hi) = window_range(cy, window, ih);
    let (x_lo, x_hi) = window_range(cx, window, iw);
    let mut vals = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let gy = (y as f64 + 0.5) / sy - 0.5;
            let gx = (x as f64 + 0.5) / sx - 0.5;
            vals.push((x as f64, y as f64, bicubic_sample(sim, gy, gx) / temperature));
        }
    }
    let m = vals.iter().map(|v| v.2).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut ex, mut ey) = (0.0, 0.0, 0.0);
    for (x, y, v) in vals {
        let p = (v - m).exp();
        z += p;
        ex += p * x;
        ey += p * y;
    }
    (ex / z, ey / z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseChoice {
    Original,
    Flipped,
}

/// Mean descriptors of the left and right halves of the grid, concatenated.
/// A middle column of an odd-width grid counts half to each side. (A single
/// global mean would be blind to mirroring.)
fn band_pool(fm: &FeatureMap) -> Array1<f64> {
    let (h, w) = fm.grid();
    let d = fm.dim();
    let data = fm.data();
    let mut acc = Array1::zeros(2 * d);
    for c in 0..w {
        let left = (w as f64 / 2.0 - c as f64).clamp(0.0, 1.0);
        for r in 0..h {
            for k in 0..d {
                let v = f64::from(data[[r, c, k]]);
                acc[k] += left * v;
                acc[d + k] += (1.0 - left) * v;
            }
        }
    }
    acc / (h * w) as f64
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let n = (a.dot(a) * b.dot(b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        a.dot(b) / n
    }
}

/// Picks the source variant whose pooled descriptors are closer to the
/// target's; ties keep the original.
pub fn pose_align(f_src: &FeatureMap, f_src_flipped: &FeatureMap, f_tgt: &FeatureMap) -> PoseChoice {
    let t = band_pool(f_tgt);
    let orig = cosine(&band_pool(f_src), &t);
    let flip = cosine(&band_pool(f_src_flipped), &t);
    if flip > orig {
        PoseChoice::Flipped
    } else {
        PoseChoice::Original
    }
}

/// Mirrors keypoints horizontally and exchanges paired labels.
pub fn swap_flipped_labels(keypoints: &[Keypoint], flip_label_map: &BTreeMap<String, String>, width: usize) -> Result<Vec<Keypoint>> {
    check_involution(flip_label_map)?;
    Ok(keypoints
        .iter()
        .map(|k| {
            let mut out = k.clone();
            out.x = width as f64 - 1.0 - k.x;
            out.label = k.label.as_ref().map(|l| flip_label_map.get(l).cloned().unwrap_or_else(|| l.clone()));
            out
        })
        .collect())
}

/// Matches every source keypoint, optionally choosing the flipped source
/// (features `f_src_flipped` of the mirrored image) by pose alignment.
pub fn match_keypoints(
    f_src: &FeatureMap,
    f_src_flipped: Option<&FeatureMap>,
    f_tgt: &FeatureMap,
    source_points: &[Keypoint],
    cfg: &MatchConfig,
) -> Result<(Vec<Keypoint>, PoseChoice)> {
    let choice = match (cfg.use_pose_align, f_src_flipped) {
        (true, Some(flipped)) => pose_align(f_src, flipped, f_tgt),
        _ => PoseChoice::Original,
    };
    let preds = match choice {
        PoseChoice::Original => source_points.iter().map(|p| match_keypoint(f_src, f_tgt, p, cfg)).collect::<Result<Vec<_>>>()?,
        PoseChoice::Flipped => {
            let flipped_fm = f_src_flipped.expect("chosen only when present");
            let width = flipped_fm.image_size().1;
            let mirrored = swap_flipped_labels(source_points, &cfg.flip_label_map, width)?;
            source_points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    // the mirrored point now carrying p's label stands in for p
                    let stand_in = p.label.as_ref().and_then(|l| mirrored.iter().find(|m| m.label.as_ref() == Some(l))).unwrap_or(&mirrored[i]);
                    let mut out = match_keypoint(flipped_fm, f_tgt, stand_in, cfg)?;
                    out.label = p.label.clone();
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((preds, choice))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckReference {
    Img,
    Bbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PckAggregation {
    PerPoint,
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PckConfig {
    pub alpha: f64,
    pub reference: PckReference,
    pub aggregation: PckAggregation,
}

impl Default for PckConfig {
    fn default() -> Self {
        Self { alpha: 0.1, reference: PckReference::Bbox, aggregation: PckAggregation::PerPoint }
    }
}

/// Per-keypoint context for PCK: the target image size, its bbox, and the class.
#[derive(Debug, Clone, PartialEq)]
pub struct PckTarget {
    pub image_size: (usize, usize),
    pub bbox: Option<BoundingBox>,
    pub class: Option<String>,
}

impl PckTarget {
    fn threshold(&self, cfg: &PckConfig) -> Result<f64> {
        let extent = match cfg.reference {
            PckReference::Img => self.image_size.0.max(self.image_size.1) as f64,
            PckReference::Bbox => {
                let b = self.bbox.ok_or(Error::MissingBBox)?;
                b.width().max(b.height())
            }
        };
        Ok(cfg.alpha * extent)
    }
}

/// Whether each prediction lies within `alpha * max(h, w)` of its ground truth.
pub fn pck_hits(predictions: &[Keypoint], ground_truth: &[Keypoint], targets: &[PckTarget], cfg: &PckConfig) -> Result<Vec<bool>> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::ConfigInvalid(format!("pck alpha {} must be positive", cfg.alpha)));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::LengthMismatch(predictions.len(), ground_truth.len()));
    }
    if targets.len() != ground_truth.len() {
        return Err(Error::LengthMismatch(targets.len(), ground_truth.len()));
    }
    predictions
        .iter()
        .zip(ground_truth)
        .zip(targets)
        .map(|((p, g), t)| Ok(p.distance(g) <= t.threshold(cfg)?))
        .collect()
}

pub fn aggregate_hits(hits: &[bool], targets: &[PckTarget], aggregation: PckAggregation) -> Result<f64> {
    if hits.is_empty() {
        return Err(Error::EmptyList("pck keypoints"));
    }
    let mean = |v: &[bool]| v.iter().filter(|h| **h).count() as f64 / v.len() as f64;
    Ok(match aggregation {
        PckAggregation::PerPoint => mean(hits),
        PckAggregation::PerClass => {
            let mut by_class: BTreeMap<Option<&str>, Vec<bool>> = BTreeMap::new();
            for (h, t) in hits.iter().zip(targets) {
                by_class.entry(t.class.as_deref()).or_default().push(*h);
            }
            by_class.values().map(|v| mean(v)).sum::<f64>() / by_class.len() as f64
        }
    })
}

pub fn pck(predictions: &[Keypoint], ground_truth: &[Keypoint], targets: &[PckTarget], cfg: &PckConfig) -> Result<f64> {
    let hits = pck_hits(predictions, ground_truth, targets, cfg)?;
    aggregate_hits(&hits, targets, cfg.aggregation)
}

/// Matches frame-0 keypoints into every frame of a sequence.
pub fn track_keypoints(frames: &[FeatureMap], keypoints: &[Keypoint], cfg: &MatchConfig) -> Result<Vec<Vec<Keypoint>>> {
    let first = frames.first().ok_or(Error::EmptyList("video frames"))?;
    frames.iter().map(|f| keypoints.iter().map(|k| match_keypoint(first, f, k, cfg)).collect()).collect()
}

//! Domain types shared by every module: images, keypoints, dense feature maps
//! and similarity matrices, plus the coordinate helpers that tie them together.
//!
//! Coordinates follow one convention everywhere. A keypoint coordinate is in
//! pixel-index units: pixel `i` is centred at `i` and its footprint covers the
//! continuous span `[i, i + 1)` once shifted by half a pixel. Mapping between
//! resolutions therefore scales `x + 0.5`, and feature-grid cell `j` of a grid
//! with `Wf` columns over a `W`-pixel image is centred at
//! `(j + 0.5) * W / Wf - 0.5`.
//!
//! Descriptor grids are stored row-major (y outer, x inner); flattening a grid
//! into a matrix gives row index `y * Wf + x`.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a descriptor is considered zero.
pub const MIN_DESCRIPTOR_NORM: f64 = 1e-12;

/// RGB image with values in `[0, 1]`, stored as `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
    id: String,
    category: Option<String>,
}

impl Image {
    pub fn new(pixels: Array3<f32>, id: impl Into<String>, category: Option<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::ShapeMismatch(format!("image must be HxWx3 with H,W >= 1, got {h}x{w}x{c}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidValue("pixel values must be finite and within [0, 1]".into()));
        }
        Ok(Self { pixels, id: id.into(), category })
    }

    /// Solid-colour image, handy for tests and placeholders.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3], id: impl Into<String>) -> Result<Self> {
        let mut px = Array3::zeros((height, width, 3));
        for c in 0..3 {
            px.slice_mut(s![.., .., c]).fill(rgb[c]);
        }
        Self::new(px, id, None)
    }

    pub fn load(path: impl AsRef<Path>, id: impl Into<String>, category: Option<String>) -> Result<Self> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(&rgb, id, category)
    }

    pub fn from_rgb8(rgb: &image::RgbImage, id: impl Into<String>, category: Option<String>) -> Result<Self> {
        let (w, h) = rgb.dimensions();
        let mut px = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                px[[y as usize, x as usize, c]] = f32::from(p[c]) / 255.0;
            }
        }
        Self::new(px, id, category)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.size();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let v = |c: usize| (self.pixels[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([v(0), v(1), v(2)])
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn category(&self) -> Option<&str> {
        self.category.as_deref()
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// `(height, width)` in pixels.
    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Bilinear resize using half-pixel centres, edges replicated.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let (h, w) = self.size();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let mut out = Array3::zeros((height, width, 3));
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = (fx - x0 as f64) as f32;
                for c in 0..3 {
                    let top = self.pixels[[y0, x0, c]] * (1.0 - tx) + self.pixels[[y0, x1, c]] * tx;
                    let bot = self.pixels[[y1, x0, c]] * (1.0 - tx) + self.pixels[[y1, x1, c]] * tx;
                    out[[y, x, c]] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
                }
            }
        }
        Image { pixels: out, id: self.id.clone(), category: self.category.clone() }
    }

    /// Mirror left-right. The id gains a `#hflip` suffix so derived seeds differ.
    pub fn flip_horizontal(&self) -> Image {
        let pixels = self.pixels.slice(s![.., ..;-1, ..]).to_owned();
        Image { pixels, id: format!("{}#hflip", self.id), category: self.category.clone() }
    }
}

/// A point annotation in pixel-index coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn default_visible() -> bool {
    true
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, label: None, visible: true }
    }

    pub fn labeled(x: f64, y: f64, label: impl Into<String>) -> Self {
        Self { x, y, label: Some(label.into()), visible: true }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the point lies on the image's pixel footprint
    /// (`-0.5 <= x <= width - 0.5`, same for y).
    pub fn in_image(&self, size: (usize, usize)) -> bool {
        let (h, w) = size;
        self.is_finite()
            && self.x >= -0.5
            && self.y >= -0.5
            && self.x <= w as f64 - 0.5
            && self.y <= h as f64 - 0.5
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::InvalidValue(format!("degenerate bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Dense `Hf x Wf x D` descriptor grid describing an image of `image_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    image_size: (usize, usize),
    normalized: bool,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, image_size: (usize, usize)) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!("empty feature map {h}x{w}x{d}")));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::ShapeMismatch("image size must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("feature map contains non-finite entries".into()));
        }
        Ok(Self { data, image_size, normalized: false })
    }

    /// Builds a map from an `(Hf*Wf) x D` matrix in row-major grid order.
    pub fn from_matrix(m: &Array2<f64>, grid: (usize, usize), image_size: (usize, usize)) -> Result<Self> {
        let (n, d) = m.dim();
        if n != grid.0 * grid.1 {
            return Err(Error::ShapeMismatch(format!("{n} rows do not fill a {}x{} grid", grid.0, grid.1)));
        }
        let data = m.mapv(|v| v as f32).to_shape((grid.0, grid.1, d)).expect("row count checked").into_owned();
        Self::new(data, image_size)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `(rows, cols)` of the descriptor grid.
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn descriptor(&self, row: usize, col: usize) -> ArrayView1<'_, f32> {
        self.data.slice(s![row, col, ..])
    }

    /// Flattens to an `(Hf*Wf) x D` matrix of f64, rows in grid order.
    pub fn to_matrix(&self) -> Array2<f64> {
        let (h, w, d) = self.data.dim();
        self.data.mapv(f64::from).to_shape((h * w, d)).expect("element count matches").into_owned()
    }

    /// Per-location L2 normalization.
    pub fn l2_normalize(&self) -> Result<FeatureMap> {
        let mut data = self.data.clone();
        let (h, w, _) = data.dim();
        for r in 0..h {
            for c in 0..w {
                let mut v = data.slice_mut(s![r, c, ..]);
                let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                if norm < MIN_DESCRIPTOR_NORM {
                    return Err(Error::ZeroDescriptor { row: r, col: c });
                }
                v.mapv_inplace(|x| (f64::from(x) / norm) as f32);
            }
        }
        Ok(FeatureMap { data, image_size: self.image_size, normalized: true })
    }

    /// Mirrors the descriptor grid left-right.
    pub fn flip_horizontal(&self) -> FeatureMap {
        FeatureMap {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
            image_size: self.image_size,
            normalized: self.normalized,
        }
    }

    /// Image-space centre of grid cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Keypoint {
        let (gh, gw) = self.grid();
        let (ih, iw) = self.image_size;
        Keypoint::new(
            (col as f64 + 0.5) * iw as f64 / gw as f64 - 0.5,
            (row as f64 + 0.5) * ih as f64 / gh as f64 - 0.5,
        )
    }

    /// Continuous grid coordinates `(gy, gx)` of an image point; cell centres
    /// sit on integers.
    pub fn image_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        image_to_grid(x, y, self.image_size, self.grid())
    }

    /// Marks the map as normalized after verifying every norm.
    pub(crate) fn assume_normalized(mut self) -> Result<Self> {
        if !self.check_unit_norms(1e-5) {
            return Err(Error::NotNormalized);
        }
        self.normalized = true;
        Ok(self)
    }

    /// Whether every descriptor has unit norm within `tol`.
    pub fn check_unit_norms(&self, tol: f64) -> bool {
        self.data
            .lanes(Axis(2))
            .into_iter()
            .all(|v| (v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() - 1.0).abs() <= tol)
    }
}

/// Continuous grid coordinates `(gy, gx)` for an image point.
pub fn image_to_grid(x: f64, y: f64, image_size: (usize, usize), grid: (usize, usize)) -> (f64, f64) {
    let gy = (y + 0.5) * grid.0 as f64 / image_size.0 as f64 - 0.5;
    let gx = (x + 0.5) * grid.1 as f64 / image_size.1 as f64 - 0.5;
    (gy, gx)
}

/// Nearest grid cell for an image point, clamped into the grid.
pub fn image_to_cell(x: f64, y: f64, image_size: (usize, usize), grid: (usize, usize)) -> (usize, usize) {
    let (gy, gx) = image_to_grid(x, y, image_size, grid);
    let r = gy.round().clamp(0.0, (grid.0 - 1) as f64) as usize;
    let c = gx.round().clamp(0.0, (grid.1 - 1) as f64) as usize;
    (r, c)
}

/// Cosine similarities between every source and target descriptor.
/// Rows follow the flattened source grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub data: Array2<f64>,
    pub source_grid: (usize, usize),
    pub target_grid: (usize, usize),
}

impl SimilarityMap {
    pub fn new(data: Array2<f64>, source_grid: (usize, usize), target_grid: (usize, usize)) -> Result<Self> {
        let expect = (source_grid.0 * source_grid.1, target_grid.0 * target_grid.1);
        if data.dim() != expect {
            return Err(Error::ShapeMismatch(format!("similarity {:?} vs grids {:?}", data.dim(), expect)));
        }
        Ok(Self { data, source_grid, target_grid })
    }

    /// Adds `offsets[i]` to every entry of row `i`.
    pub fn shift_rows(&self, offsets: &[f64]) -> SimilarityMap {
        let mut data = self.data.clone();
        for (mut row, off) in data.rows_mut().into_iter().zip(offsets) {
            row += *off;
        }
        SimilarityMap { data, ..*self }
    }
}

/// An annotated image pair with matched keypoints.
#[derive(Debug, Clone)]
pub struct CorrespondencePair {
    pub source: Image,
    pub target: Image,
    pub keypoints: Vec<(Keypoint, Keypoint)>,
    pub target_bbox: Option<BoundingBox>,
}

impl CorrespondencePair {
    pub fn new(
        source: Image,
        target: Image,
        keypoints: Vec<(Keypoint, Keypoint)>,
        target_bbox: Option<BoundingBox>,
    ) -> Result<Self> {
        for (a, b) in &keypoints {
            if !a.visible || !b.visible {
                return Err(Error::InvalidValue("paired keypoints must be visible".into()));
            }
            if !a.in_image(source.size()) || !b.in_image(target.size()) {
                return Err(Error::InvalidValue(format!("keypoint pair {a:?} / {b:?} outside image")));
            }
        }
        if let Some(b) = &target_bbox {
            b.validate()?;
        }
        Ok(Self { source, target, keypoints, target_bbox })
    }
}

/// Bilinearly interpolated descriptor at an image point. Points on the outer
/// half-cell band replicate the edge cells.
pub fn bilinear_sample(fm: &FeatureMap, point: &Keypoint) -> Result<Array1<f32>> {
    let (ih, iw) = fm.image_size();
    if !point.in_image((ih, iw)) {
        return Err(Error::OutOfBounds { x: point.x, y: point.y, width: iw, height: ih });
    }
    let (gy, gx) = fm.image_to_grid(point.x, point.y);
    Ok(sample_grid(fm, gy, gx))
}

/// Bilinear interpolation at continuous grid coordinates, clamped to the grid.
pub fn sample_grid(fm: &FeatureMap, gy: f64, gx: f64) -> Array1<f32> {
    let (weights, cells) = bilinear_weights(gy, gx, fm.grid());
    let mut out = Array1::<f64>::zeros(fm.dim());
    for (wt, (r, c)) in weights.iter().zip(cells) {
        if *wt != 0.0 {
            out.scaled_add(*wt, &fm.descriptor(r, c).mapv(f64::from));
        }
    }
    out.mapv(|v| v as f32)
}

/// The four corner cells and weights used for bilinear interpolation.
pub fn bilinear_weights(gy: f64, gx: f64, grid: (usize, usize)) -> ([f64; 4], [(usize, usize); 4]) {
    let gy = gy.clamp(0.0, (grid.0 - 1) as f64);
    let gx = gx.clamp(0.0, (grid.1 - 1) as f64);
    let r0 = gy.floor() as usize;
    let c0 = gx.floor() as usize;
    let r1 = (r0 + 1).min(grid.0 - 1);
    let c1 = (c0 + 1).min(grid.1 - 1);
    let ty = gy - r0 as f64;
    let tx = gx - c0 as f64;
    (
        [(1.0 - ty) * (1.0 - tx), (1.0 - ty) * tx, ty * (1.0 - tx), ty * tx],
        [(r0, c0), (r0, c1), (r1, c0), (r1, c1)],
    )
}

/// Maps a keypoint between image resolutions given as `(height, width)`.
pub fn rescale_point(point: &Keypoint, from: (usize, usize), to: (usize, usize)) -> Keypoint {
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    Keypoint {
        x: (point.x + 0.5) * sx - 0.5,
        y: (point.y + 0.5) * sy - 0.5,
        label: point.label.clone(),
        visible: point.visible,
    }
}

//! Multi-view RGB-D manifests and the CO3D annotation converter.
//!
//! One JSON object per frame:
//!
//! ```text
//! {"schema_version":1,"sequence":"s0","frame_index":3,"image":"s0/rgb/003.png",
//!  "depth":"s0/depth/003.f32","depth_format":"f32","depth_scale":1.0,
//!  "intrinsics":[fx,s,cx, 0,fy,cy, 0,0,1],"extrinsics":[16 values, row-major],
//!  "mask":"s0/mask/003.png","category":"cube"}
//! ```
//!
//! Extrinsics are world-from-camera with `+x` right, `+y` down, `+z` forward.
//! Depth formats: `f32` (raw little-endian float32, `H x W`), `png16`
//! (16-bit unsigned integers) and `png16f` (16-bit PNG holding IEEE half
//! floats). Stored values are multiplied by `depth_scale`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Camera, CameraView};
use crate::domain::Image;
use crate::error::{Error, Result};
use crate::manifest::{read_jsonl, resolve, write_jsonl, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    F32,
    Png16,
    Png16f,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sequence: String,
    pub frame_index: usize,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub depth_format: DepthFormat,
    #[serde(default = "unit_scale")]
    pub depth_scale: f64,
    pub intrinsics: [f64; 9],
    pub extrinsics: [f64; 16],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl FrameRecord {
    pub fn camera(&self) -> Result<Camera> {
        Camera::new(Matrix3::from_row_slice(&self.intrinsics), Matrix4::from_row_slice(&self.extrinsics))
    }

    pub fn load(&self, root: &Path) -> Result<CameraView> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::parse("multiview manifest", format!("unsupported schema_version {}", self.schema_version)));
        }
        let id = format!("{}/{:06}", self.sequence, self.frame_index);
        let image = Image::load(resolve(root, &self.image), id, self.category.clone())?;
        let depth = read_depth(&resolve(root, &self.depth), self.depth_format, self.depth_scale, image.size())?;
        let mask = match &self.mask {
            Some(p) => {
                let path = resolve(root, p);
                let m = image::open(&path)?.to_luma8();
                if (m.height() as usize, m.width() as usize) != image.size() {
                    return Err(Error::ShapeMismatch(format!("mask {} size differs from image", path.display())));
                }
                Some(Array2::from_shape_fn(image.size(), |(r, c)| m.get_pixel(c as u32, r as u32)[0] >= 128))
            }
            None => None,
        };
        CameraView::new(image, depth, self.camera()?, mask)
    }
}

pub fn read_depth(path: &Path, format: DepthFormat, scale: f64, size: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = size;
    let raw: Vec<f64> = match format {
        DepthFormat::F32 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() != h * w * 4 {
                return Err(Error::parse(path.display().to_string(), format!("expected {} bytes for {h}x{w} depth", h * w * 4)));
            }
            bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect()
        }
        DepthFormat::Png16 | DepthFormat::Png16f => {
            let img = image::open(path)?.into_luma16();
            if (img.height() as usize, img.width() as usize) != size {
                return Err(Error::ShapeMismatch(format!("depth {} size differs from image", path.display())));
            }
            img.pixels()
                .map(|p| match format {
                    DepthFormat::Png16 => f64::from(p[0]),
                    _ => f64::from(half::f16::from_bits(p[0]).to_f32()),
                })
                .collect()
        }
    };
    let depth = Array2::from_shape_vec((h, w), raw).expect("length checked").mapv(|d| if d.is_finite() && d > 0.0 { d * scale } else { 0.0 });
    Ok(depth)
}

/// Frames grouped by sequence name and ordered by frame index.
pub fn read_multiview(path: &Path) -> Result<BTreeMap<String, Vec<FrameRecord>>> {
    let mut out: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    for rec in read_jsonl::<FrameRecord>(path)? {
        out.entry(rec.sequence.clone()).or_default().push(rec);
    }
    for frames in out.values_mut() {
        frames.sort_by_key(|f| f.frame_index);
    }
    Ok(out)
}

pub fn load_sequence(frames: &[FrameRecord], root: &Path) -> Result<Vec<CameraView>> {
    frames.iter().map(|f| f.load(root)).collect()
}

/// Writes views as PNG colour, raw `f32` depth and PNG masks under
/// `dir/<sequence>/`, returning records relative to `dir`.
pub fn write_sequence(views: &[CameraView], dir: &Path, sequence: &str) -> Result<Vec<FrameRecord>> {
    let seq_dir = dir.join(sequence);
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
    let mut records = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let image = PathBuf::from(sequence).join(format!("{i:04}.png"));
        let depth = PathBuf::from(sequence).join(format!("{i:04}.depth.f32"));
        v.image.to_rgb8().save(dir.join(&image))?;
        let bytes: Vec<u8> = v.depth.iter().flat_map(|d| (*d as f32).to_le_bytes()).collect();
        fs::write(dir.join(&depth), bytes).map_err(|e| Error::io(dir.join(&depth), e))?;
        let mask = match &v.foreground_mask {
            Some(m) => {
                let p = PathBuf::from(sequence).join(format!("{i:04}.mask.png"));
                let (h, w) = m.dim();
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if m[[y as usize, x as usize]] { 255 } else { 0 }]));
                img.save(dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let mut intrinsics = [0.0; 9];
        let mut extrinsics = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r * 3 + c] = v.camera.intrinsics()[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                extrinsics[r * 4 + c] = v.camera.extrinsics()[(r, c)];
            }
        }
        records.push(FrameRecord {
            schema_version: SCHEMA_VERSION,
            sequence: sequence.to_string(),
            frame_index: i,
            image,
            depth,
            depth_format: DepthFormat::F32,
            depth_scale: 1.0,
            intrinsics,
            extrinsics,
            mask,
            category: v.image.category().map(str::to_string),
        });
    }
    Ok(records)
}

#[derive(Debug, Deserialize)]
struct Co3dFrame {
    sequence_name: String,
    frame_number: usize,
    image: Co3dImage,
    depth: Option<Co3dDepth>,
    mask: Option<Co3dPath>,
    viewpoint: Co3dViewpoint,
    #[serde(default)]
    meta: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct Co3dImage {
    path: PathBuf,
    /// `[height, width]`
    size: [usize; 2],
}

#[derive(Debug, Deserialize)]
struct Co3dDepth {
    path: PathBuf,
    scale_adjustment: f64,
}

#[derive(Debug, Deserialize)]
struct Co3dPath {
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Co3dViewpoint {
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    #[serde(rename = "T")]
    t: [f64; 3],
    focal_length: [f64; 2],
    principal_point: [f64; 2],
    #[serde(default = "default_intrinsics_format")]
    intrinsics_format: String,
}

fn default_intrinsics_format() -> String {
    "ndc_norm_image_bounds".into()
}

/// Converts a CO3D viewpoint (row-vector convention `x_cam = x_world R + T`,
/// camera `+x` left and `+y` up, NDC intrinsics) into pixel intrinsics and a
/// world-from-camera pose in this crate's convention.
pub fn co3d_camera(
    r: [[f64; 3]; 3],
    t: [f64; 3],
    focal: [f64; 2],
    principal: [f64; 2],
    format: &str,
    size: (usize, usize),
) -> Result<Camera> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let (sx, sy) = match format {
        "ndc_norm_image_bounds" => (w / 2.0, h / 2.0),
        "ndc_isotropic" => (w.min(h) / 2.0, w.min(h) / 2.0),
        other => return Err(Error::parse("co3d viewpoint", format!("unknown intrinsics_format {other}"))),
    };
    let intr = Matrix3::new(
        focal[0] * sx,
        0.0,
        w / 2.0 - principal[0] * sx - 0.5,
        0.0,
        focal[1] * sy,
        h / 2.0 - principal[1] * sy - 0.5,
        0.0,
        0.0,
        1.0,
    );
    let rm = Matrix3::from_fn(|i, j| r[i][j]);
    let flip = Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, -1.0, 1.0));
    let tv = nalgebra::Vector3::new(t[0], t[1], t[2]);
    // camera_from_world = [F Rᵀ | F T]; invert the rigid transform
    let rot = rm * flip;
    let trans = -(rm * tv);
    let mut pose = Matrix4::identity();
    pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
    Camera::new(intr, pose)
}

/// Reads a CO3D `frame_annotations` file (`.json` or gzip `.jgz`) and writes
/// a multi-view manifest. Frames without depth are skipped. Returns the
/// number of frames written.
pub fn convert_co3d(annotations: &Path, dataset_root: &Path, out: &Path, category: Option<&str>) -> Result<usize> {
    let raw = fs::read(annotations).map_err(|e| Error::io(annotations, e))?;
    let text = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut s = String::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_string(&mut s).map_err(|e| Error::io(annotations, e))?;
        s
    } else {
        String::from_utf8(raw).map_err(|e| Error::parse(annotations.display().to_string(), e))?
    };
    let frames: Vec<Co3dFrame> = serde_json::from_str(&text).map_err(|e| Error::parse(annotations.display().to_string(), e))?;
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let same_root = fs::canonicalize(&out_dir).ok().zip(fs::canonicalize(dataset_root).ok()).is_some_and(|(a, b)| a == b);
    let place = |p: &Path| if same_root { p.to_path_buf() } else { dataset_root.join(p) };
    let mut records = Vec::new();
    for f in frames {
        let Some(depth) = f.depth else {
            continue;
        };
        let size = (f.image.size[0], f.image.size[1]);
        let v = &f.viewpoint;
        let cam = co3d_camera(v.r, v.t, v.focal_length, v.principal_point, &v.intrinsics_format, size)?;
        let mut intrinsics = [0.0; 9];
        let mut extrinsics = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r * 3 + c] = cam.intrinsics()[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                extrinsics[r * 4 + c] = cam.extrinsics()[(r, c)];
            }
        }
        let cat = category
            .map(str::to_string)
            .or_else(|| f.meta.as_ref().and_then(|m| m.get("category")).and_then(Value::as_str).map(str::to_string))
            .or_else(|| f.image.path.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned()));
        records.push(FrameRecord {
            schema_version: SCHEMA_VERSION,
            sequence: f.sequence_name,
            frame_index: f.frame_number,
            image: place(&f.image.path),
            depth: place(&depth.path),
            depth_format: DepthFormat::Png16f,
            depth_scale: depth.scale_adjustment,
            intrinsics,
            extrinsics,
            mask: f.mask.map(|m| place(&m.path)),
            category: cat,
        });
    }
    write_jsonl(out, &records)?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::textured_cube_orbit;
    use super::super::world_to_screen;
    use super::*;
    use nalgebra::{Point3, Rotation3, Vector3};
    use std::io::Write;

    #[test]
    fn written_sequence_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let views = textured_cube_orbit(3, (32, 32), "io");
        let recs = write_sequence(&views, dir.path(), "seq-a").unwrap();
        let manifest = dir.path().join("multiview.jsonl");
        write_jsonl(&manifest, &recs).unwrap();
        let seqs = read_multiview(&manifest).unwrap();
        let loaded = load_sequence(&seqs["seq-a"], dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&views) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.foreground_mask, b.foreground_mask);
            let worst = a.depth.iter().zip(b.depth.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-6);
            assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
        }
    }

    #[test]
    fn half_float_png_depth_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let vals = [0.0f32, 1.5, 2.25, 0.125];
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(2, 2, |x, y| image::Luma([half::f16::from_f32(vals[(y * 2 + x) as usize]).to_bits()]));
        img.save(&path).unwrap();
        let d = read_depth(&path, DepthFormat::Png16f, 2.0, (2, 2)).unwrap();
        assert_eq!(d, ndarray::array![[0.0, 3.0], [4.5, 0.25]]);
    }

    /// Projects with the CO3D / PyTorch3D formulas directly.
    fn co3d_project(r: &Matrix3<f64>, t: &Vector3<f64>, focal: [f64; 2], pp: [f64; 2], size: (f64, f64), w: &Vector3<f64>) -> (f64, f64) {
        let cam = r.transpose() * w + t;
        let (xn, yn) = (focal[0] * cam.x / cam.z + pp[0], focal[1] * cam.y / cam.z + pp[1]);
        // NDC +x points left and +y up; half-extents are W/2 and H/2
        let (h, wd) = size;
        ((1.0 - xn) * wd / 2.0 - 0.5, (1.0 - yn) * h / 2.0 - 0.5)
    }

    #[test]
    fn co3d_camera_matches_reference_projection() {
        let r = *Rotation3::from_euler_angles(0.3, -0.4, 1.1).matrix();
        let t = Vector3::new(0.2, -0.1, 4.0);
        let (focal, pp) = ([1.8, 2.2], [0.05, -0.08]);
        let size = (120usize, 90usize);
        let rows = [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]];
        let cam = co3d_camera(rows, [t.x, t.y, t.z], focal, pp, "ndc_norm_image_bounds", size).unwrap();
        for w in [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.3, -0.2, 0.1), Vector3::new(-0.4, 0.5, -0.3)] {
            let (x, y, _) = world_to_screen(&Point3::from(w), &cam).unwrap();
            let (xr, yr) = co3d_project(&r, &t, focal, pp, (120.0, 90.0), &w);
            assert!((x - xr).abs() < 1e-9 && (y - yr).abs() < 1e-9);
        }
    }

    #[test]
    fn converts_gzipped_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let ann = serde_json::json!([
            {"sequence_name": "s1", "frame_number": 2,
             "image": {"path": "apple/s1/images/frame000002.jpg", "size": [10, 12]},
             "depth": {"path": "apple/s1/depths/frame000002.jpg.geometric.png", "scale_adjustment": 1.5},
             "mask": {"path": "apple/s1/masks/frame000002.png"},
             "viewpoint": {"R": [[1,0,0],[0,1,0],[0,0,1]], "T": [0,0,3], "focal_length": [2,2], "principal_point": [0,0],
                           "intrinsics_format": "ndc_isotropic"}},
            {"sequence_name": "s1", "frame_number": 1,
             "image": {"path": "apple/s1/images/frame000001.jpg", "size": [10, 12]},
             "viewpoint": {"R": [[1,0,0],[0,1,0],[0,0,1]], "T": [0,0,3], "focal_length": [2,2], "principal_point": [0,0]}}
        ]);
        let path = dir.path().join("frame_annotations.jgz");
        let mut enc = flate2::write::GzEncoder::new(fs::File::create(&path).unwrap(), flate2::Compression::default());
        enc.write_all(ann.to_string().as_bytes()).unwrap();
        enc.finish().unwrap();
        let out = dir.path().join("mv.jsonl");
        assert_eq!(convert_co3d(&path, dir.path(), &out, None).unwrap(), 1);
        let seqs = read_multiview(&out).unwrap();
        let f = &seqs["s1"][0];
        assert_eq!(f.category.as_deref(), Some("apple"));
        assert_eq!(f.depth_format, DepthFormat::Png16f);
        assert_eq!(f.image, PathBuf::from("apple/s1/images/frame000002.jpg"));
        // isotropic NDC: scale min(H, W) / 2 = 5, centre at (W/2 - 0.5, H/2 - 0.5)
        assert_eq!(f.intrinsics, [10.0, 0.0, 5.5, 0.0, 10.0, 4.5, 0.0, 0.0, 1.0]);
    }
}

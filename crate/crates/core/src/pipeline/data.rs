//! Dataset adapters. Every external layout is converted into the crate's own
//! manifest records (`PairRecord`, `ImageRecord`, `FrameRecord`) before
//! loading, so one loader path validates everything.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{Point3, Vector3};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

use super::config::{DataConfig, DataKind};
use crate::domain::{BoundingBox, CorrespondencePair, Image, Keypoint};
use crate::error::{Error, Result};
use crate::geom3d::manifest::{load_sequence, read_multiview};
use crate::geom3d::synthetic::textured_cube_orbit;
use crate::geom3d::{world_to_screen, CameraView};
use crate::manifest::{manifest_root, read_images, read_pairs, ImageRecord, KeypointPair, PairRecord, SCHEMA_VERSION};
use crate::util::rng_from;

fn need_path(cfg: &DataConfig) -> Result<&Path> {
    cfg.path.as_deref().ok_or_else(|| Error::ConfigInvalid(format!("data.path is required for data.kind = {:?}", cfg.kind)))
}

/// Images for distillation and indexing.
pub fn load_images(cfg: &DataConfig, seed: u64) -> Result<Vec<Image>> {
    let images = match cfg.kind {
        DataKind::Synthetic => synthetic_images(cfg.count, (cfg.image_size[0], cfg.image_size[1]), seed),
        DataKind::Images => {
            let path = need_path(cfg)?;
            let root = manifest_root(path);
            read_images(path)?.iter().map(|r| r.load(&root)).collect::<Result<_>>()?
        }
        DataKind::Coco => coco_subset(need_path(cfg)?, cfg.count, seed)?,
        DataKind::Multiview => load_multiview(cfg)?.into_iter().flatten().map(|v| v.image).collect(),
        DataKind::Pairs | DataKind::Spair | DataKind::Willow | DataKind::Cub => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::new();
            for p in load_pairs(cfg, seed)? {
                for img in [p.source, p.target] {
                    if seen.insert(img.id().to_string()) {
                        out.push(img);
                    }
                }
            }
            out
        }
    };
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(images)
}

/// Annotated keypoint pairs for supervised fine-tuning and evaluation.
pub fn load_pairs(cfg: &DataConfig, seed: u64) -> Result<Vec<CorrespondencePair>> {
    let (records, root) = match cfg.kind {
        DataKind::Synthetic => return synthetic_pairs(cfg, seed),
        DataKind::Pairs => {
            let path = need_path(cfg)?;
            (read_pairs(path)?, manifest_root(path))
        }
        DataKind::Spair => {
            let root = need_path(cfg)?;
            (spair_records(root, &cfg.split)?, root.to_path_buf())
        }
        DataKind::Willow => {
            let path = need_path(cfg)?;
            (willow_records(path)?, manifest_root(path))
        }
        DataKind::Cub => {
            let root = need_path(cfg)?;
            (cub_records(root, &cfg.split, cfg.count)?, root.to_path_buf())
        }
        other => return Err(Error::ConfigInvalid(format!("data.kind {other:?} has no keypoint annotations"))),
    };
    let pairs = records.iter().map(|r| r.load(&root)).collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairs)
}

/// Multi-view RGB-D sequences.
pub fn load_multiview(cfg: &DataConfig) -> Result<Vec<Vec<CameraView>>> {
    match cfg.kind {
        DataKind::Synthetic => Ok((0..cfg.sequences)
            .map(|s| textured_cube_orbit(cfg.frames, (cfg.image_size[0], cfg.image_size[1]), &format!("cube{s}")))
            .collect()),
        DataKind::Multiview => {
            let path = need_path(cfg)?;
            let root = manifest_root(path);
            read_multiview(path)?.values().map(|frames| load_sequence(frames, &root)).collect()
        }
        other => Err(Error::ConfigInvalid(format!("data.kind {other:?} is not multi-view"))),
    }
}

const SHAPES: [&str; 4] = ["disc", "bar", "ring", "cross"];

/// Procedural images: a two-colour gradient with blotches behind one of four
/// shape categories at a random place, size and colour.
pub fn synthetic_images(count: usize, size: (usize, usize), seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut rng = rng_from(&["synthetic-image", &seed.to_string(), &i.to_string()]);
            let category = SHAPES[rng.random_range(0..SHAPES.len())];
            let (h, w) = size;
            let c0: [f32; 3] = rng.random();
            let c1: [f32; 3] = rng.random();
            let fg: [f32; 3] = rng.random();
            let cy = rng.random_range(0.3..0.7) * h as f64;
            let cx = rng.random_range(0.3..0.7) * w as f64;
            let radius = rng.random_range(0.15..0.3) * h.min(w) as f64;
            let blotches: Vec<(f64, f64, f64, [f32; 3])> =
                (0..6).map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(2.0..8.0), rng.random())).collect();
            let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                let (fy, fx) = (y as f64, x as f64);
                let (dy, dx) = ((fy - cy) / radius, (fx - cx) / radius);
                let r = dy.hypot(dx);
                let inside = match category {
                    "disc" => r <= 1.0,
                    "bar" => dx.abs() <= 1.0 && dy.abs() <= 0.35,
                    "ring" => (0.6..=1.0).contains(&r),
                    _ => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
                };
                if inside {
                    return fg[c];
                }
                for (by, bx, br, col) in &blotches {
                    if (fy - by).hypot(fx - bx) <= *br {
                        return col[c];
                    }
                }
                let t = (x + y) as f32 / (h + w) as f32;
                c0[c] * (1.0 - t) + c1[c] * t
            });
            Image::new(pixels, format!("synthetic-{seed}-{i:05}"), Some(category.to_string())).expect("generated pixels lie in [0, 1]")
        })
        .collect()
}

/// Cell-centre points of the orbit cube's six faces: `(label, point, normal)`.
fn cube_keypoints() -> Vec<(String, Point3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for axis in 0..3 {
        for (si, sign) in [-1.0, 1.0].into_iter().enumerate() {
            let mut n = Vector3::zeros();
            n[axis] = sign;
            let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
            for (k, (u, v)) in [-1.0, 0.0, 1.0].iter().flat_map(|u| [-1.0, 0.0, 1.0].map(|v| (*u, v))).enumerate() {
                let mut p = n * 0.5;
                p[b] += u / 3.0;
                p[c] += v / 3.0;
                out.push((format!("face{}-cell{k}", axis * 2 + si), Point3::from(p), n));
            }
        }
    }
    out
}

fn visible_projection(view: &CameraView, p: &Point3<f64>, n: &Vector3<f64>) -> Option<Keypoint> {
    let to_cam = view.camera.centre() - p;
    // the cube is convex: facing the camera means unoccluded
    if to_cam.normalize().dot(n) < 0.2 {
        return None;
    }
    let (x, y, _) = world_to_screen(p, &view.camera).ok()?;
    let k = Keypoint::new(x, y);
    k.in_image(view.size()).then_some(k)
}

fn mask_bbox(view: &CameraView) -> Option<BoundingBox> {
    let mask = view.foreground_mask.as_ref()?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for ((r, c), fg) in mask.indexed_iter() {
        if *fg {
            x0 = x0.min(c as f64 - 0.5);
            y0 = y0.min(r as f64 - 0.5);
            x1 = x1.max(c as f64 + 0.5);
            y1 = y1.max(r as f64 + 0.5);
        }
    }
    BoundingBox::new(x0, y0, x1, y1).ok()
}

/// Annotated pairs from textured-cube orbits: labelled face points seen by
/// both frames, target bbox from the target's foreground mask.
pub fn synthetic_pairs(cfg: &DataConfig, seed: u64) -> Result<Vec<CorrespondencePair>> {
    let sequences = load_multiview(&DataConfig { kind: DataKind::Synthetic, ..cfg.clone() })?;
    if sequences.is_empty() || cfg.frames < 2 {
        return Err(Error::EmptyDataset);
    }
    let points = cube_keypoints();
    let mut rng = rng_from(&["synthetic-pairs", &seed.to_string()]);
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while out.len() < cfg.count && attempts < cfg.count * 20 {
        attempts += 1;
        let seq = &sequences[out.len() % sequences.len()];
        let gap = rng.random_range(1..=4.min(seq.len() - 1));
        let a = rng.random_range(0..seq.len() - gap);
        let (src, tgt) = (&seq[a], &seq[a + gap]);
        let mut kps: Vec<(Keypoint, Keypoint)> = points
            .iter()
            .filter_map(|(label, p, n)| {
                let ks = visible_projection(src, p, n)?;
                let kt = visible_projection(tgt, p, n)?;
                Some((Keypoint { label: Some(label.clone()), ..ks }, Keypoint { label: Some(label.clone()), ..kt }))
            })
            .collect();
        if kps.is_empty() {
            continue;
        }
        kps.shuffle(&mut rng);
        kps.truncate(cfg.keypoints_per_pair.max(1));
        kps.sort_by(|x, y| x.0.label.cmp(&y.0.label));
        out.push(CorrespondencePair::new(src.image.clone(), tgt.image.clone(), kps, mask_bbox(tgt))?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Seeded uniform subset of a flat image directory.
pub fn coco_subset(dir: &Path, count: usize, seed: u64) -> Result<Vec<Image>> {
    let mut files = list_images(dir)?;
    files.shuffle(&mut rng_from(&["coco-subset", &seed.to_string()]));
    files.truncate(count);
    files.sort();
    info!("coco subset: {} of the images in {}", files.len(), dir.display());
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Image::load(p, id, None)
        })
        .collect()
}

/// Ordered frame files of a video directory.
pub fn video_frames(dir: &Path) -> Result<Vec<Image>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyList("video frames"));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Image::load(p, id, None)
        })
        .collect()
}

fn image_record(path: PathBuf, category: Option<String>) -> ImageRecord {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    ImageRecord { schema_version: SCHEMA_VERSION, path, id, category }
}

fn labelled_pairs(src: &[[f64; 2]], tgt: &[[f64; 2]], labels: &[String]) -> Vec<KeypointPair> {
    src.iter()
        .zip(tgt)
        .zip(labels)
        .map(|((s, t), l)| KeypointPair { source: Keypoint::labeled(s[0], s[1], l.clone()), target: Keypoint::labeled(t[0], t[1], l.clone()) })
        .collect()
}

#[derive(Deserialize)]
struct SpairAnnotation {
    src_imname: String,
    trg_imname: String,
    category: String,
    src_kps: Vec<[f64; 2]>,
    trg_kps: Vec<[f64; 2]>,
    trg_bndbox: [f64; 4],
    #[serde(default)]
    kps_ids: Vec<serde_json::Value>,
}

/// SPair-71k layout: `PairAnnotation/<split>/*.json` and
/// `JPEGImages/<category>/<image>`. Bboxes are the annotated target boxes.
pub fn spair_records(root: &Path, split: &str) -> Result<Vec<PairRecord>> {
    let dir = root.join("PairAnnotation").join(split);
    let mut files: Vec<PathBuf> =
        fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "json")).collect();
    files.sort();
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let a: SpairAnnotation = serde_json::from_str(&text).map_err(|e| Error::parse(f.display().to_string(), e))?;
            let labels: Vec<String> = if a.kps_ids.len() == a.src_kps.len() {
                a.kps_ids.iter().map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())).collect()
            } else {
                (0..a.src_kps.len()).map(|i| i.to_string()).collect()
            };
            let img = |name: &str| image_record(Path::new("JPEGImages").join(&a.category).join(name), Some(a.category.clone()));
            let [x0, y0, x1, y1] = a.trg_bndbox;
            Ok(PairRecord {
                schema_version: SCHEMA_VERSION,
                source: img(&a.src_imname),
                target: img(&a.trg_imname),
                keypoints: labelled_pairs(&a.src_kps, &a.trg_kps, &labels),
                target_bbox: Some(BoundingBox::new(x0, y0, x1, y1)?),
            })
        })
        .collect()
}

/// PF-WILLOW pair list: `imageA,imageB` then ten x and ten y coordinates for
/// each image. The bbox is the tight box around the target keypoints.
pub fn willow_records(csv_path: &Path) -> Result<Vec<PairRecord>> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::parse(csv_path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::parse(csv_path.display().to_string(), e))?;
        let bad = |m: String| Error::parse(format!("{}:{}", csv_path.display(), line + 2), m);
        if row.len() < 2 || (row.len() - 2) % 4 != 0 {
            return Err(bad(format!("expected 2 + 4n columns, got {}", row.len())));
        }
        let n = (row.len() - 2) / 4;
        let nums: Vec<f64> = row.iter().skip(2).map(|v| v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<_>>()?;
        let pts = |off: usize| (0..n).map(|i| [nums[off + i], nums[off + n + i]]).collect::<Vec<_>>();
        let (src, tgt) = (pts(0), pts(2 * n));
        let category = |p: &str| Path::new(p).parent().and_then(|d| d.file_name()).and_then(|s| s.to_str()).map(str::to_string);
        let (xs, ys): (Vec<f64>, Vec<f64>) = tgt.iter().map(|p| (p[0], p[1])).unzip();
        let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
        let bbox = BoundingBox::new(fold(&xs, f64::min, f64::MAX), fold(&ys, f64::min, f64::MAX), fold(&xs, f64::max, f64::MIN), fold(&ys, f64::max, f64::MIN))?;
        let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        out.push(PairRecord {
            schema_version: SCHEMA_VERSION,
            source: image_record(PathBuf::from(&row[0]), category(&row[0])),
            target: image_record(PathBuf::from(&row[1]), category(&row[1])),
            keypoints: labelled_pairs(&src, &tgt, &labels),
            target_bbox: Some(bbox),
        });
    }
    Ok(out)
}

fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

/// CUB-200-2011 layout. Pairs are consecutive images (by id) of the same
/// class within the split, keeping parts visible in both; at most `limit`.
pub fn cub_records(root: &Path, split: &str, limit: usize) -> Result<Vec<PairRecord>> {
    let want_train = match split {
        "train" | "trn" => true,
        "test" | "val" => false,
        other => return Err(Error::ConfigInvalid(format!("unknown CUB split {other}"))),
    };
    let num = |s: &str, path: &Path| s.parse::<f64>().map_err(|e| Error::parse(path.display().to_string(), e));
    let p = |name: &str| root.join(name);
    let images: BTreeMap<u64, String> =
        read_table(&p("images.txt"))?.into_iter().filter(|r| r.len() >= 2).map(|r| (r[0].parse().unwrap_or(0), r[1].clone())).collect();
    let split_of: BTreeMap<u64, bool> = read_table(&p("train_test_split.txt"))?.into_iter().filter(|r| r.len() >= 2).map(|r| (r[0].parse().unwrap_or(0), r[1] == "1")).collect();
    let class_of: BTreeMap<u64, String> = read_table(&p("image_class_labels.txt"))?.into_iter().filter(|r| r.len() >= 2).map(|r| (r[0].parse().unwrap_or(0), r[1].clone())).collect();
    let class_names: BTreeMap<String, String> = read_table(&p("classes.txt"))?.into_iter().filter(|r| r.len() >= 2).map(|r| (r[0].clone(), r[1].clone())).collect();
    let part_names: BTreeMap<String, String> = read_table(&p("parts/parts.txt"))?.into_iter().filter(|r| r.len() >= 2).map(|r| (r[0].clone(), r[1..].join(" "))).collect();
    let mut boxes = BTreeMap::new();
    let bb_path = p("bounding_boxes.txt");
    for r in read_table(&bb_path)? {
        if r.len() >= 5 {
            let (x, y, w, h) = (num(&r[1], &bb_path)?, num(&r[2], &bb_path)?, num(&r[3], &bb_path)?, num(&r[4], &bb_path)?);
            boxes.insert(r[0].parse::<u64>().unwrap_or(0), BoundingBox::new(x, y, x + w, y + h)?);
        }
    }
    let mut parts: BTreeMap<u64, BTreeMap<String, Keypoint>> = BTreeMap::new();
    let loc_path = p("parts/part_locs.txt");
    for r in read_table(&loc_path)? {
        if r.len() >= 5 && r[4] == "1" {
            let label = part_names.get(&r[1]).cloned().unwrap_or_else(|| r[1].clone());
            let kp = Keypoint::labeled(num(&r[2], &loc_path)?, num(&r[3], &loc_path)?, label.clone());
            parts.entry(r[0].parse().unwrap_or(0)).or_default().insert(label, kp);
        }
    }
    let mut by_class: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (id, _) in &images {
        if split_of.get(id) == Some(&want_train) {
            if let Some(c) = class_of.get(id) {
                by_class.entry(c.clone()).or_default().push(*id);
            }
        }
    }
    let mut out = Vec::new();
    for (class, ids) in &by_class {
        let category = class_names.get(class).cloned().unwrap_or_else(|| class.clone());
        for w in ids.windows(2) {
            if out.len() >= limit {
                return Ok(out);
            }
            let (a, b) = (w[0], w[1]);
            let (Some(pa), Some(pb)) = (parts.get(&a), parts.get(&b)) else { continue };
            let keypoints: Vec<KeypointPair> =
                pa.iter().filter_map(|(label, ka)| pb.get(label).map(|kb| KeypointPair { source: ka.clone(), target: kb.clone() })).collect();
            if keypoints.is_empty() {
                continue;
            }
            let rec = |id: u64| ImageRecord {
                schema_version: SCHEMA_VERSION,
                path: Path::new("images").join(&images[&id]),
                id: id.to_string(),
                category: Some(category.clone()),
            };
            out.push(PairRecord { schema_version: SCHEMA_VERSION, source: rec(a), target: rec(b), keypoints, target_bbox: boxes.get(&b).copied() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use crate::geom3d::screen_to_world;

    #[test]
    fn synthetic_images_are_deterministic_and_categorised() {
        let a = synthetic_images(6, (32, 40), 1);
        let b = synthetic_images(6, (32, 40), 1);
        assert_eq!(a.iter().map(|i| i.pixels().clone()).collect::<Vec<_>>(), b.iter().map(|i| i.pixels().clone()).collect::<Vec<_>>());
        assert!(a.iter().all(|i| i.size() == (32, 40) && SHAPES.contains(&i.category().unwrap())));
        assert_ne!(a[0].pixels(), synthetic_images(1, (32, 40), 2)[0].pixels());
    }

    #[test]
    fn synthetic_pairs_carry_consistent_labels() {
        let cfg = DataConfig { count: 5, frames: 10, image_size: [64, 64], ..DataConfig::default() };
        let pairs = synthetic_pairs(&cfg, 0).unwrap();
        assert_eq!(pairs.len(), 5);
        for p in &pairs {
            assert!(!p.keypoints.is_empty() && p.keypoints.len() <= 10);
            assert!(p.target_bbox.is_some());
            for (s, t) in &p.keypoints {
                assert_eq!(s.label, t.label);
            }
        }
    }

    #[test]
    fn cube_keypoints_land_on_the_rendered_surface() {
        let views = textured_cube_orbit(4, (64, 64), "kp");
        let mut checked = 0;
        for v in &views {
            for (_, p, n) in cube_keypoints() {
                if let Some(k) = visible_projection(v, &p, &n) {
                    let (r, c) = ((k.y + 0.5).floor() as usize, (k.x + 0.5).floor() as usize);
                    let (r, c) = (r.min(63), c.min(63));
                    // the rendered surface at the nearest pixel is the same face, within a pixel footprint
                    let w = screen_to_world(c as f64, r as f64, v.depth[[r, c]], &v.camera).unwrap();
                    assert!((w - p).norm() < 0.1, "{w:?} vs {p:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    fn write_png(path: &Path, h: u32, w: u32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])).save(path).unwrap();
    }

    #[test]
    fn spair_layout_converts() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_png(&root.join("JPEGImages/cat/a.png"), 40, 50);
        write_png(&root.join("JPEGImages/cat/b.png"), 40, 50);
        fs::create_dir_all(root.join("PairAnnotation/test")).unwrap();
        let ann = r#"{"src_imname":"a.png","trg_imname":"b.png","category":"cat","src_kps":[[1,2],[3,4]],"trg_kps":[[5,6],[7,8]],
                      "src_bndbox":[0,0,10,10],"trg_bndbox":[1,2,30,20],"kps_ids":["3","7"]}"#;
        fs::write(root.join("PairAnnotation/test/0001.json"), ann).unwrap();
        let cfg = DataConfig { kind: DataKind::Spair, path: Some(root.to_path_buf()), ..DataConfig::default() };
        let pairs = load_pairs(&cfg, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].keypoints[1].1, Keypoint::labeled(7.0, 8.0, "7"));
        assert_eq!(pairs[0].target_bbox.unwrap().width(), 29.0);
        assert_eq!(pairs[0].source.category(), Some("cat"));
    }

    #[test]
    fn willow_csv_converts() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("car(G)/a.png"), 30, 30);
        write_png(&dir.path().join("car(G)/b.png"), 30, 30);
        let mut f = fs::File::create(dir.path().join("pairs.csv")).unwrap();
        writeln!(f, "imageA,imageB,XA1,XA2,YA1,YA2,XB1,XB2,YB1,YB2").unwrap();
        writeln!(f, "car(G)/a.png,car(G)/b.png,1,2,3,4,10,20,5,15").unwrap();
        let cfg = DataConfig { kind: DataKind::Willow, path: Some(dir.path().join("pairs.csv")), ..DataConfig::default() };
        let pairs = load_pairs(&cfg, 0).unwrap();
        assert_eq!(pairs[0].keypoints[0], (Keypoint::labeled(1.0, 3.0, "0"), Keypoint::labeled(10.0, 5.0, "0")));
        assert_eq!(pairs[0].target_bbox.unwrap(), BoundingBox::new(10.0, 5.0, 20.0, 15.0).unwrap());
        assert_eq!(pairs[0].source.category(), Some("car(G)"));
    }

    #[test]
    fn cub_layout_converts() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for name in ["001.Bird/x.png", "001.Bird/y.png", "001.Bird/z.png"] {
            write_png(&root.join("images").join(name), 40, 40);
        }
        fs::write(root.join("images.txt"), "1 001.Bird/x.png\n2 001.Bird/y.png\n3 001.Bird/z.png\n").unwrap();
        fs::write(root.join("train_test_split.txt"), "1 0\n2 0\n3 1\n").unwrap();
        fs::write(root.join("image_class_labels.txt"), "1 1\n2 1\n3 1\n").unwrap();
        fs::write(root.join("classes.txt"), "1 001.Bird\n").unwrap();
        fs::write(root.join("bounding_boxes.txt"), "1 0 0 20 20\n2 1 1 30 25\n3 0 0 5 5\n").unwrap();
        fs::create_dir_all(root.join("parts")).unwrap();
        fs::write(root.join("parts/parts.txt"), "1 beak\n2 left eye\n").unwrap();
        fs::write(root.join("parts/part_locs.txt"), "1 1 5 5 1\n1 2 6 6 1\n2 1 7 7 1\n2 2 0 0 0\n3 1 1 1 1\n").unwrap();
        let cfg = DataConfig { kind: DataKind::Cub, path: Some(root.to_path_buf()), ..DataConfig::default() };
        let pairs = load_pairs(&cfg, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].keypoints, vec![(Keypoint::labeled(5.0, 5.0, "beak"), Keypoint::labeled(7.0, 7.0, "beak"))]);
        assert_eq!(pairs[0].target_bbox.unwrap(), BoundingBox::new(1.0, 1.0, 31.0, 26.0).unwrap());
    }

    #[test]
    fn coco_subset_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            write_png(&dir.path().join(format!("{i:03}.jpg").replace(".jpg", ".png")), 8, 8);
        }
        let ids = |seed| coco_subset(dir.path(), 3, seed).unwrap().iter().map(|i| i.id().to_string()).collect::<Vec<_>>();
        assert_eq!(ids(1), ids(1));
        assert_eq!(ids(1).len(), 3);
        let cfg = DataConfig { kind: DataKind::Coco, path: None, ..DataConfig::default() };
        assert!(matches!(load_images(&cfg, 0), Err(Error::ConfigInvalid(_))));
    }
}

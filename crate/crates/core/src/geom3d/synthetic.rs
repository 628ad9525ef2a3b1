//! Ray-cast synthetic RGB-D scenes used as geometric oracles and toy data.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use ndarray::{Array2, Array3};
use rand::Rng;

use super::{Camera, CameraView};
use crate::domain::Image;
use crate::util::rng_from;

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const MIN_T: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Infinite plane.
    Plane { point: Point3<f64>, normal: Vector3<f64> },
    /// Parallelogram `centre + s u + t v` for `|s|, |t| <= 1`.
    Rect { centre: Point3<f64>, u: Vector3<f64>, v: Vector3<f64> },
    /// Axis-aligned box.
    Cuboid { centre: Point3<f64>, half: Vector3<f64> },
}

/// Surface colouring: a grid of `cells x cells` flat colours per face, keyed
/// by face-local coordinates in `[-1, 1]²`. Planes tile the pattern with
/// period `scale` in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub cells: usize,
    pub scale: f64,
    /// `faces * cells * cells` colours.
    pub colours: Vec<[f32; 3]>,
}

impl Texture {
    pub fn random(faces: usize, cells: usize, scale: f64, seed: &str) -> Self {
        let mut rng = rng_from(&["texture", seed]);
        let colours = (0..faces * cells * cells).map(|_| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]).collect();
        Self { cells, scale, colours }
    }

    fn lookup(&self, face: usize, s: f64, t: f64) -> [f32; 3] {
        let n = self.cells as f64;
        let cell = |v: f64| (((v + 1.0) / 2.0 * n).floor().clamp(0.0, n - 1.0)) as usize;
        let faces = self.colours.len() / (self.cells * self.cells);
        self.colours[(face % faces) * self.cells * self.cells + cell(t) * self.cells + cell(s)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub foreground: bool,
    pub texture: Texture,
}

impl Primitive {
    pub fn plane(point: Point3<f64>, normal: Vector3<f64>, foreground: bool) -> Self {
        Self { shape: Shape::Plane { point, normal: normal.normalize() }, foreground, texture: Texture::random(1, 2, 0.5, "plane") }
    }

    pub fn rect(centre: Point3<f64>, u: Vector3<f64>, v: Vector3<f64>, foreground: bool) -> Self {
        Self { shape: Shape::Rect { centre, u, v }, foreground, texture: Texture::random(1, 4, 1.0, "rect") }
    }

    pub fn cuboid(centre: Point3<f64>, half: Vector3<f64>, foreground: bool, texture: Texture) -> Self {
        Self { shape: Shape::Cuboid { centre, half }, foreground, texture }
    }

    /// Nearest hit along `o + t d`: `(t, face, s, t_local)`.
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, f64, f64)> {
        match &self.shape {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / denom;
                if t <= MIN_T {
                    return None;
                }
                let q = o + d * t - point;
                let a = normal.cross(&if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
                let b = normal.cross(&a);
                let wrap = |v: f64| (v / self.texture.scale).rem_euclid(1.0) * 2.0 - 1.0;
                Some((t, 0, wrap(q.dot(&a)), wrap(q.dot(&b))))
            }
            Shape::Rect { centre, u, v } => {
                let normal = u.cross(v);
                let denom = normal.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(centre - o)) / denom;
                if t <= MIN_T {
                    return None;
                }
                let q = o + d * t - centre;
                let (s, tl) = (q.dot(u) / u.norm_squared(), q.dot(v) / v.norm_squared());
                (s.abs() <= 1.0 && tl.abs() <= 1.0).then_some((t, 0, s, tl))
            }
            Shape::Cuboid { centre, half } => {
                let (mut t_near, mut t_far, mut axis, mut sign) = (f64::NEG_INFINITY, f64::INFINITY, 0, 1.0);
                for k in 0..3 {
                    let (lo, hi) = (centre[k] - half[k], centre[k] + half[k]);
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo || o[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                    let mut s = -1.0;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                        s = 1.0;
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = k;
                        sign = s;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= MIN_T {
                    return None;
                }
                let q = o + d * t_near - centre;
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                let face = axis * 2 + usize::from(sign > 0.0);
                Some((t_near, face, q[a] / half[a], q[b] / half[b]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

/// Renders colour, camera-frame depth and (if any primitive is marked
/// foreground) a foreground mask. Rays that hit nothing get depth 0.
pub fn render(scene: &Scene, cam: &Camera, size: (usize, usize), id: &str, category: Option<String>) -> CameraView {
    let (h, w) = size;
    let origin = cam.centre();
    let forward: Vector3<f64> = cam.extrinsics().fixed_view::<3, 1>(0, 2).into_owned();
    let mut pixels = Array3::from_elem((h, w, 3), 0.0f32);
    let mut depth = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            let d = cam.ray_direction(c as f64, r as f64);
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| p.intersect(&origin, &d).map(|h| (h, p)))
                .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
            let colour = match hit {
                Some(((t, face, s, tl), prim)) => {
                    depth[[r, c]] = (d * t).dot(&forward);
                    mask[[r, c]] = prim.foreground;
                    prim.texture.lookup(face, s, tl)
                }
                None => BACKGROUND,
            };
            for k in 0..3 {
                pixels[[r, c, k]] = colour[k];
            }
        }
    }
    let image = Image::new(pixels, id, category).expect("rendered pixels are valid");
    let has_foreground = scene.primitives.iter().any(|p| p.foreground);
    CameraView::new(image, depth, cam.clone(), has_foreground.then_some(mask)).expect("render shapes agree")
}

/// World-from-camera pose at `eye` looking at `target`. `down` is the world
/// direction that should appear as `+y` in the image.
pub fn look_at(eye: Point3<f64>, target: Point3<f64>, down: Vector3<f64>) -> Matrix4<f64> {
    let z = (target - eye).normalize();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_columns(&[x, y, z]));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
    m
}

pub fn intrinsics(focal: f64, size: (usize, usize)) -> Matrix3<f64> {
    let (cx, cy) = ((size.1 as f64 - 1.0) / 2.0, (size.0 as f64 - 1.0) / 2.0);
    Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0)
}

/// A tilted textured plane behind a smaller foreground card.
pub fn planes_scene() -> Scene {
    Scene {
        primitives: vec![
            Primitive::plane(Point3::new(0.0, 0.0, 2.0), Vector3::new(0.2, 0.1, -1.0), false),
            Primitive::rect(Point3::new(-0.2, 0.1, 0.0), Vector3::new(0.5, 0.0, 0.1), Vector3::new(0.0, 0.4, 0.0), true),
        ],
    }
}

/// Textured unit cube at the origin.
pub fn cube_scene(seed: &str) -> Scene {
    Scene { primitives: vec![Primitive::cuboid(Point3::origin(), Vector3::new(0.5, 0.5, 0.5), true, Texture::random(6, 3, 1.0, seed))] }
}

/// `frames` views on a 120° arc around a textured cube, slightly above it.
pub fn textured_cube_orbit(frames: usize, size: (usize, usize), seed: &str) -> Vec<CameraView> {
    let scene = cube_scene(seed);
    let radius = 2.6;
    let elevation: f64 = 0.45;
    let focal = size.0.min(size.1) as f64 * 1.3;
    let intr = intrinsics(focal, size);
    let down = Vector3::new(0.0, -1.0, 0.0);
    (0..frames)
        .map(|i| {
            let theta = 0.3 + (i as f64) * (120f64.to_radians() / (frames.max(2) - 1) as f64);
            let eye = Point3::new(
                radius * elevation.cos() * theta.cos(),
                radius * elevation.sin(),
                radius * elevation.cos() * theta.sin(),
            );
            let cam = Camera::new(intr, look_at(eye, Point3::origin(), down)).expect("look-at pose is rigid");
            render(&scene, &cam, size, &format!("{seed}-frame{i:03}"), Some("cube".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{build_3d_samples, screen_to_world, world_to_screen, Geom3DConfig};
    use super::*;

    #[test]
    fn look_at_is_rigid_and_centres_target() {
        let m = look_at(Point3::new(1.0, 2.0, -3.0), Point3::new(0.2, 0.0, 0.5), Vector3::new(0.0, -1.0, 0.0));
        let cam = Camera::new(intrinsics(50.0, (31, 41)), m).unwrap();
        let (x, y, _) = world_to_screen(&Point3::new(0.2, 0.0, 0.5), &cam).unwrap();
        assert!((x - 20.0).abs() < 1e-9 && (y - 15.0).abs() < 1e-9);
        // world up appears above the centre
        let (_, y_up, _) = world_to_screen(&Point3::new(0.2, 0.3, 0.5), &cam).unwrap();
        assert!(y_up < 15.0);
    }

    #[test]
    fn rendered_depth_reprojects_onto_surface() {
        let views = textured_cube_orbit(3, (48, 48), "geom");
        let v = &views[1];
        let mut hits = 0;
        for ((r, c), d) in v.depth.indexed_iter() {
            if *d > 0.0 {
                let p = screen_to_world(c as f64, r as f64, *d, &v.camera).unwrap();
                let max = p.coords.abs().max();
                assert!((max - 0.5).abs() < 1e-9, "{p:?}");
                hits += 1;
            }
        }
        assert!(hits > 200);
        assert!(v.foreground_mask.as_ref().unwrap().iter().filter(|m| **m).count() == hits);
    }

    #[test]
    fn cube_orbit_correspondences_reproject() {
        let views = textured_cube_orbit(20, (64, 64), "orbit");
        let cfg = Geom3DConfig { points_per_pair: 64, ..Geom3DConfig::default() };
        let mut rng = rng_from(&["orbit-pairs"]);
        let batch = build_3d_samples(&views, &cfg, (8, 8), 6, &mut rng).unwrap();
        assert!(!batch.samples.is_empty());
        for s in &batch.samples {
            let (src, tgt) = (&views[s.source_frame], &views[s.target_frame]);
            for (a, b) in s.source_pixels.iter().zip(&s.target_pixels) {
                // back-project the target point with the target's own depth at the nearest pixel
                let (r, c) = super::super::nearest_pixel(b.x, b.y, tgt.size()).unwrap();
                let w = screen_to_world(b.x, b.y, tgt.depth[[r, c]], &tgt.camera).unwrap();
                let (x, y, _) = world_to_screen(&w, &src.camera).unwrap();
                assert!(((x - a.x).powi(2) + (y - a.y).powi(2)).sqrt() < 0.5);
            }
        }
    }
}

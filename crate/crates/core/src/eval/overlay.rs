//! Side-by-side correspondence overlays: green for correct, red for wrong.

use image::{Rgb, RgbImage};

use crate::domain::{Image, Keypoint};

pub const CORRECT: Rgb<u8> = Rgb([0, 200, 0]);
pub const WRONG: Rgb<u8> = Rgb([220, 0, 0]);
pub const NEUTRAL: Rgb<u8> = Rgb([255, 200, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

pub fn draw_dot(img: &mut RgbImage, x: f64, y: f64, radius: i64, c: Rgb<u8>) {
    let (cx, cy) = ((x + 0.5).floor() as i64, (y + 0.5).floor() as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

pub fn draw_line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), c: Rgb<u8>) {
    let steps = (to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = from.0 + t * (to.0 - from.0);
        let y = from.1 + t * (to.1 - from.1);
        put(img, (x + 0.5).floor() as i64, (y + 0.5).floor() as i64, c);
    }
}

/// Source on the left, target on the right. `correct[i]` colours pair `i`;
/// `None` draws it in a neutral colour (no ground truth).
pub fn render_overlay(source: &Image, target: &Image, source_points: &[Keypoint], predictions: &[Keypoint], correct: &[Option<bool>]) -> RgbImage {
    let (s, t) = (source.to_rgb8(), target.to_rgb8());
    let mut out = RgbImage::new(s.width() + t.width(), s.height().max(t.height()));
    image::imageops::replace(&mut out, &s, 0, 0);
    image::imageops::replace(&mut out, &t, i64::from(s.width()), 0);
    let shift = f64::from(s.width());
    for (i, (p, q)) in source_points.iter().zip(predictions).enumerate() {
        let colour = match correct.get(i).copied().flatten() {
            Some(true) => CORRECT,
            Some(false) => WRONG,
            None => NEUTRAL,
        };
        draw_line(&mut out, (p.x, p.y), (q.x + shift, q.y), colour);
        draw_dot(&mut out, p.x, p.y, 2, colour);
        draw_dot(&mut out, q.x + shift, q.y, 2, colour);
    }
    out
}

/// A single frame with its tracked points.
pub fn render_points(frame: &Image, points: &[Keypoint]) -> RgbImage {
    let mut out = frame.to_rgb8();
    for p in points {
        draw_dot(&mut out, p.x, p.y, 2, NEUTRAL);
    }
    out
}

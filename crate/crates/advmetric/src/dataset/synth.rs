//! Procedural handwritten-style digit images.
//!
//! Renders each digit class from a stroke template under a random affine
//! jitter (shift, rotation, scale, shear), with stroke-thickness variation
//! and pixel noise. Used as an offline stand-in when no IDX dataset is
//! available; images are quantized to byte precision so IDX round trips
//! are exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, SplitTag, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::error::Result;
use crate::rng;

type Point = (f32, f32);

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, a0: f32, a1: f32, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f32 / n as f32;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke polylines per digit, in a unit box with y pointing down.
fn template(digit: u8) -> Vec<Vec<Point>> {
    use std::f32::consts::PI;
    match digit {
        0 => vec![arc(0.5, 0.5, 0.26, 0.36, 0.0, 2.0 * PI, 24)],
        1 => vec![
            vec![(0.34, 0.3), (0.52, 0.14)],
            vec![(0.52, 0.14), (0.52, 0.86)],
        ],
        2 => {
            let mut top = arc(0.48, 0.34, 0.24, 0.2, PI, 2.0 * PI * 0.98, 12);
            top.push((0.28, 0.84));
            vec![top, vec![(0.28, 0.84), (0.76, 0.84)]]
        }
        3 => vec![
            arc(0.46, 0.32, 0.22, 0.18, -0.8 * PI, 0.6 * PI, 12),
            arc(0.46, 0.68, 0.24, 0.2, -0.6 * PI, 0.8 * PI, 12),
        ],
        4 => vec![
            vec![(0.62, 0.14), (0.24, 0.6), (0.8, 0.6)],
            vec![(0.62, 0.14), (0.62, 0.86)],
        ],
        5 => {
            let mut bowl = vec![(0.32, 0.14), (0.32, 0.46)];
            bowl.extend(arc(0.46, 0.64, 0.24, 0.2, -0.5 * PI, 0.75 * PI, 14));
            vec![vec![(0.72, 0.14), (0.32, 0.14)], bowl]
        }
        6 => {
            let mut stem = vec![(0.64, 0.14)];
            stem.extend(arc(0.78, 0.62, 0.42, 0.46, PI * 1.05, PI * 0.95, 8));
            vec![stem, arc(0.48, 0.66, 0.18, 0.18, 0.0, 2.0 * PI, 18)]
        }
        7 => vec![vec![(0.26, 0.16), (0.74, 0.16), (0.42, 0.86)]],
        8 => vec![
            arc(0.5, 0.32, 0.17, 0.16, 0.0, 2.0 * PI, 18),
            arc(0.5, 0.67, 0.21, 0.19, 0.0, 2.0 * PI, 18),
        ],
        9 => vec![
            arc(0.5, 0.36, 0.19, 0.2, 0.0, 2.0 * PI, 18),
            vec![(0.69, 0.36), (0.62, 0.86)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f32 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Render one jittered digit into a 28x28 buffer of [0,1] pixels.
pub fn render_digit(digit: u8, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rot: f32 = rng.gen_range(-0.20..0.20);
    let (sx, sy) = (rng.gen_range(0.85..1.12), rng.gen_range(0.85..1.12));
    let shear: f32 = rng.gen_range(-0.15..0.15);
    let (tx, ty) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let thickness: f32 = rng.gen_range(0.9..1.6);
    let soft = 0.8;
    let side = IMAGE_SIDE as f32;

    // unit-box template point -> pixel coordinates
    let (cos_r, sin_r) = (rot.cos(), rot.sin());
    let map = |(ux, uy): Point| -> Point {
        let (mut x, mut y) = (ux - 0.5, uy - 0.5);
        x += shear * y;
        x *= sx;
        y *= sy;
        let (rx, ry) = (cos_r * x - sin_r * y, sin_r * x + cos_r * y);
        (
            (rx + 0.5) * (side - 6.0) + 3.0 + tx,
            (ry + 0.5) * (side - 6.0) + 3.0 + ty,
        )
    };

    let strokes: Vec<Vec<Point>> = template(digit)
        .into_iter()
        .map(|poly| poly.into_iter().map(map).collect())
        .collect();

    let mut img = vec![0.0f32; IMAGE_PIXELS];
    for (py, row) in img.chunks_mut(IMAGE_SIDE).enumerate() {
        for (px, out) in row.iter_mut().enumerate() {
            let p = (px as f32 + 0.5, py as f32 + 0.5);
            let mut best = f32::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    best = best.min(dist_to_segment(p, seg[0], seg[1]));
                }
            }
            let v = ((thickness + soft - best) / soft).clamp(0.0, 1.0);
            let noisy = v + rng.gen_range(-0.04..0.04);
            // byte quantization keeps IDX round trips exact
            *out = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    img
}

/// Balanced synthetic dataset of `n` digits, deterministic in `seed`.
pub fn generate(n: usize, seed: u64, split: SplitTag) -> Result<LabeledDataset> {
    let tag = match split {
        SplitTag::Train => "synth/train",
        SplitTag::Test => "synth/test",
    };
    let mut r = rng::stream(seed, tag);
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % NUM_CLASSES) as u8;
        images.extend_from_slice(&render_digit(digit, &mut r));
        labels.push(digit);
    }
    LabeledDataset::new(images, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(30, 5, SplitTag::Train).unwrap();
        let b = generate(30, 5, SplitTag::Train).unwrap();
        assert_eq!(a.images_flat(), b.images_flat());
        assert_eq!(a.labels(), b.labels());
        let c = generate(30, 6, SplitTag::Train).unwrap();
        assert_ne!(a.images_flat(), c.images_flat());
    }

    #[test]
    fn classes_are_balanced_and_pixels_bounded() {
        let ds = generate(100, 0, SplitTag::Test).unwrap();
        for c in 0..NUM_CLASSES {
            assert_eq!(ds.class_index()[c].len(), 10);
        }
        assert!(ds.images_flat().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // strokes produce substantial ink
        let mean: f32 = ds.images_flat().iter().sum::<f32>() / ds.images_flat().len() as f32;
        assert!(mean > 0.05 && mean < 0.6, "mean ink {mean}");
    }
}

//! Seeded synthetic registered infrared/visible scenes.
//!
//! The visible image is a textured reflectance field under uneven, partly
//! dim lighting. The infrared image shares the scene geometry but shows
//! warm objects as bright blobs over a cool, smooth background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fsutil::create_dir_all;
use crate::imgio::{save_image, scan_dataset, DatasetManifest, ImagePair, ImagePlane};

struct Blob {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    heat: f32,
}

impl Blob {
    fn inside(&self, y: f32, x: f32) -> f32 {
        let d = ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2);
        // soft edge over the last ~15% of the radius
        ((1.0 - d) / 0.3).clamp(0.0, 1.0)
    }
}

/// One registered pair of `height×width` images; `color` yields an RGB
/// visible image.
pub fn synthetic_pair(id: &str, seed: u64, height: usize, width: usize, color: bool) -> Result<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let blobs: Vec<Blob> = (0..rng.random_range(2..=4))
        .map(|_| Blob {
            cy: rng.random_range(0.2..0.8) * h,
            cx: rng.random_range(0.15..0.85) * w,
            ry: rng.random_range(0.12..0.3) * h,
            rx: rng.random_range(0.06..0.15) * w,
            heat: rng.random_range(0.6..1.0),
        })
        .collect();
    let stripe = rng.random_range(0.05..0.12f32);
    let angle = rng.random_range(0.0..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let light_dir = rng.random_range(0.0..std::f32::consts::TAU);
    let dim = rng.random_range(0.3..0.5f32);
    let tint: [f32; 3] = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
    ];
    let cells = rng.random_range(2..5usize);
    let cell_shade: Vec<f32> = (0..cells * cells).map(|_| rng.random_range(0.35..0.95)).collect();
    let grain: Vec<f32> = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();

    let reflectance = |y: usize, x: usize| {
        let (fy, fx) = (y as f32, x as f32);
        let cy = (y * cells / height).min(cells - 1);
        let cx = (x * cells / width).min(cells - 1);
        let texture = 0.5 + 0.5 * ((fx * ca + fy * sa) * stripe).sin();
        let occluded: f32 = blobs.iter().map(|b| b.inside(fy, fx)).fold(0.0, f32::max);
        let base = cell_shade[cy * cells + cx] * (0.85 + 0.15 * texture);
        (base * (1.0 - 0.4 * occluded) + 0.01 * grain[y * width + x]).clamp(0.02, 1.0)
    };
    let lighting = |y: usize, x: usize| {
        let u = (x as f32 / w - 0.5) * light_dir.cos() + (y as f32 / h - 0.5) * light_dir.sin();
        dim + (1.0 - dim) * (0.5 + u).clamp(0.0, 1.0)
    };

    let channels = if color { 3 } else { 1 };
    let visible = ImagePlane::from_fn(height, width, channels, |y, x, c| {
        let t = if color { tint[c] } else { 1.0 };
        (lighting(y, x) * reflectance(y, x) * t).clamp(0.0, 1.0)
    })?;
    let infrared = ImagePlane::from_fn(height, width, 1, |y, x, _| {
        let (fy, fx) = (y as f32, x as f32);
        let background = 0.2 + 0.1 * (fy / h) + 0.05 * (fx / w * 3.0).sin();
        let heat = blobs.iter().map(|b| b.heat * b.inside(fy, fx)).fold(0.0, f32::max);
        (background + (1.0 - background) * heat + 0.015 * grain[y * width + x]).clamp(0.0, 1.0)
    })?;
    Ok(ImagePair {
        id: id.to_string(),
        visible,
        infrared,
    })
}

/// Writes `count` pairs as `root/{ir,vis}/scene_NN.png` and scans them back.
pub fn write_dataset(
    root: &Path,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
    color: bool,
) -> Result<DatasetManifest> {
    let (ir_dir, vis_dir) = (root.join("ir"), root.join("vis"));
    create_dir_all(&ir_dir)?;
    create_dir_all(&vis_dir)?;
    for k in 0..count {
        let id = format!("scene_{k:02}");
        let pair = synthetic_pair(&id, seed.wrapping_add(k as u64), height, width, color)?;
        save_image(&pair.infrared, &ir_dir.join(format!("{id}.png")))?;
        save_image(&pair.visible, &vis_dir.join(format!("{id}.png")))?;
    }
    scan_dataset(root)
}

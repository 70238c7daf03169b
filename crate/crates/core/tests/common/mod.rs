//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use facedup::align::{Detection, ARCFACE_TEMPLATE};
use facedup::corpus::PixelBuffer;
use facedup::features::{Embedding, FeatureRecord, FeatureStore, Quality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bilinear value noise: a random 7x7 grid of colours interpolated over the
/// image, plus fine per-pixel noise.
pub fn smooth_image(seed: u64, width: u32, height: u32) -> PixelBuffer {
    const GRID: usize = 7;
    let mut r = rng(seed);
    let grid: Vec<[f64; 3]> = (0..GRID * GRID)
        .map(|_| [r.random_range(0.0..255.0), r.random_range(0.0..255.0), r.random_range(0.0..255.0)])
        .collect();
    PixelBuffer::from_fn_rgb(width, height, |x, y| {
        let gx = x as f64 / (width - 1) as f64 * (GRID - 1) as f64;
        let gy = y as f64 / (height - 1) as f64 * (GRID - 1) as f64;
        let (x0, y0) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |i: usize, j: usize, c: usize| grid[j * GRID + i][c];
        let noise: f64 = r.random_range(-6.0..6.0);
        [0, 1, 2].map(|c| {
            let v = at(x0, y0, c) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0, c) * fx * (1.0 - fy)
                + at(x0, y0 + 1, c) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1, c) * fx * fy;
            (v + noise).clamp(0.0, 255.0) as u8
        })
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

pub fn jpeg(buf: &PixelBuffer, quality: u8) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality)
        .write_image(buf.data(), buf.width(), buf.height(), image::ExtendedColorType::Rgb8)
        .unwrap();
    out
}

pub fn random_unit(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `center` plus noise of the given relative size, normalized.
pub fn near(r: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Embedding {
    let v: Vec<f64> = center.iter().map(|c| c + noise * r.random_range(-1.0..1.0)).collect();
    Embedding::new(v).unwrap().0
}

/// A detection whose landmarks are the alignment template scaled to the image.
pub fn template_detection(width: u32, height: u32) -> Detection {
    let s = width.min(height) as f64 / 112.0;
    Detection {
        bbox: [0.0, 0.0, width as f64, height as f64],
        confidence: 0.99,
        landmarks: ARCFACE_TEMPLATE.map(|[x, y]| [x * s, y * s]),
    }
}

pub fn record(embedding: Embedding, quality: f64, detections: Option<Vec<Detection>>) -> FeatureRecord {
    FeatureRecord {
        embedding: Some(embedding),
        quality: Quality(Some(quality)),
        detections,
    }
}

pub fn save_store(store: &FeatureStore, path: &Path) {
    write_file(path, store.to_sidecar_text().as_bytes());
}

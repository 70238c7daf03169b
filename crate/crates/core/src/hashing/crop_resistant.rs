//! Crop-resistant multi-hashing.
//!
//! The image is reduced to a fixed-size grayscale segmentation image, smoothed,
//! and split into bright ("hill") and dark ("valley") 4-connected regions around a
//! threshold. Each sufficiently large region's bounding box is cropped from the
//! full-resolution image and hashed on its own, so that two images still share
//! segment hashes after one of them has been cropped.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::{to_grayscale, PixelBuffer};
use crate::error::{Error, Result};
use crate::hashing::perceptual::{dhash, hamming, phash, Hash64};
use crate::hashing::resample::resize_lanczos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentHash {
    DHash,
    PHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropResistantParams {
    /// Side of the square segmentation image.
    pub segmentation_size: u32,
    pub blur_sigma: f64,
    pub median_size: u32,
    /// Pixels strictly above this value form hills, the rest valleys.
    pub segment_threshold: u8,
    /// Regions must contain more than this many segmentation pixels.
    pub min_segment_size: usize,
    pub segment_hash: SegmentHash,
}

impl Default for CropResistantParams {
    fn default() -> Self {
        CropResistantParams {
            segmentation_size: 300,
            blur_sigma: 2.0,
            median_size: 3,
            segment_threshold: 128,
            min_segment_size: 500,
            segment_hash: SegmentHash::DHash,
        }
    }
}

/// One hash per detected segment, in segmentation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MultiHash {
    pub segments: Vec<Hash64>,
}

impl MultiHash {
    pub fn new(segments: Vec<Hash64>) -> Self {
        MultiHash { segments }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Comma-separated hex, `-` when empty.
    pub fn to_hex_list(&self) -> String {
        if self.segments.is_empty() {
            return "-".to_owned();
        }
        self.segments
            .iter()
            .map(|h| h.to_hex())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_hex_list(s: &str) -> Result<Self> {
        if s == "-" || s.is_empty() {
            return Ok(MultiHash::default());
        }
        s.split(',')
            .map(str::parse)
            .collect::<Result<Vec<_>>>()
            .map(MultiHash::new)
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(gray: &[u8], w: usize, h: usize, sigma: f64) -> Vec<u8> {
    if sigma <= 0.0 {
        return gray.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * gray[y * w + clamp(x as isize + k as isize - radius, w)] as f64)
                .sum();
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
            out[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Square median filter with edge clamping.
fn median_filter(gray: &[u8], w: usize, h: usize, size: u32) -> Vec<u8> {
    if size <= 1 {
        return gray.to_vec();
    }
    let r = (size / 2) as isize;
    let mut window = Vec::with_capacity((size * size) as usize);
    let mut out = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(gray[yy * w + xx]);
                }
            }
            window.sort_unstable();
            out[y as usize * w + x as usize] = window[window.len() / 2];
        }
    }
    out
}

/// Bounding box of a region in segmentation coordinates, `max` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
    pub size: usize,
}

/// 4-connected regions of `mask == polarity`, seeded in raster order.
fn regions_of(mask: &[bool], polarity: bool, w: usize, h: usize, seen: &mut [bool]) -> Vec<Region> {
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || mask[start] != polarity {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut r = Region {
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
            size: 0,
        };
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            r.size += 1;
            r.min_x = r.min_x.min(x);
            r.min_y = r.min_y.min(y);
            r.max_x = r.max_x.max(x + 1);
            r.max_y = r.max_y.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && mask[j] == polarity {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(r);
    }
    out
}

/// Hills first, then valleys; regions not larger than `min_size` are dropped.
pub fn find_segments(gray: &[u8], w: usize, h: usize, threshold: u8, min_size: usize) -> Vec<Region> {
    let mask: Vec<bool> = gray.iter().map(|&v| v > threshold).collect();
    let mut seen = vec![false; w * h];
    let mut regions = regions_of(&mask, true, w, h, &mut seen);
    regions.extend(regions_of(&mask, false, w, h, &mut seen));
    regions.retain(|r| r.size > min_size);
    regions
}

fn round_half_even(v: f64) -> u32 {
    let r = v.round();
    let out = if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    };
    out.max(0.0) as u32
}

pub fn crop_resistant_hash(buf: &PixelBuffer, params: &CropResistantParams) -> Result<MultiHash> {
    if buf.is_degenerate() {
        return Err(Error::DegenerateImage {
            width: buf.width(),
            height: buf.height(),
        });
    }
    let side = params.segmentation_size as usize;
    let small = resize_lanczos(&to_grayscale(buf), side as u32, side as u32);
    let blurred = gaussian_blur(small.data(), side, side, params.blur_sigma);
    let smooth = median_filter(&blurred, side, side, params.median_size);
    let regions = find_segments(&smooth, side, side, params.segment_threshold, params.min_segment_size);

    let sx = buf.width() as f64 / side as f64;
    let sy = buf.height() as f64 / side as f64;
    let mut segments = Vec::with_capacity(regions.len());
    for r in regions {
        let x0 = round_half_even(r.min_x as f64 * sx);
        let y0 = round_half_even(r.min_y as f64 * sy);
        let x1 = round_half_even(r.max_x as f64 * sx).max(x0 + 1);
        let y1 = round_half_even(r.max_y as f64 * sy).max(y0 + 1);
        let crop = buf.crop(x0, y0, x1, y1);
        if crop.is_degenerate() {
            continue;
        }
        let h = match params.segment_hash {
            SegmentHash::DHash => dhash(&crop)?,
            SegmentHash::PHash => phash(&crop)?,
        };
        segments.push(h);
    }
    Ok(MultiHash::new(segments))
}

/// Hamming cutoff derived from a bit error rate: `floor(64 × rate)`.
pub fn hamming_cutoff(bit_error_rate: f64) -> u32 {
    (64.0 * bit_error_rate).floor() as u32
}

/// Greedy one-to-one pairing of segments by ascending distance; the hashes match
/// when at least `region_cutoff` pairs lie within `floor(64 × bit_error_rate)`.
pub fn multihash_match(a: &MultiHash, b: &MultiHash, region_cutoff: usize, bit_error_rate: f64) -> bool {
    if a.is_empty() || b.is_empty() {
        return false;
    }
    let cutoff = hamming_cutoff(bit_error_rate);
    let mut pairs: Vec<(u32, usize, usize)> = Vec::with_capacity(a.segments.len() * b.segments.len());
    for (i, &ha) in a.segments.iter().enumerate() {
        for (j, &hb) in b.segments.iter().enumerate() {
            let d = hamming(ha, hb);
            if d <= cutoff {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_a = vec![false; a.segments.len()];
    let mut used_b = vec![false; b.segments.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        matched += 1;
        if matched >= region_cutoff {
            return true;
        }
    }
    matched >= region_cutoff
}

//! 64-bit perceptual hashes: DCT pHash and difference hash.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{to_grayscale, PixelBuffer};
use crate::error::{Error, Result};
use crate::hashing::resample::resize_lanczos;

/// Side of the downscaled image the DCT runs on.
pub const DCT_SIZE: usize = 32;
/// Side of the low-frequency block kept from the DCT.
pub const HASH_SIDE: usize = 8;

/// DCT coefficients are compared on a grid of 2^-20 so that mathematically equal
/// coefficients compare equal regardless of floating-point summation noise.
pub const COEFF_GRID_BITS: i32 = 20;

/// 64 boolean cells of an 8×8 grid. Cell `(row, col)` is stored at bit
/// `63 - (8 * row + col)`, so the hex form reads row-major from the most
/// significant nibble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash64(pub u64);

impl Hash64 {
    pub fn from_cells(cells: impl IntoIterator<Item = bool>) -> Self {
        let mut bits = 0u64;
        let mut n = 0;
        for cell in cells {
            bits = (bits << 1) | cell as u64;
            n += 1;
        }
        debug_assert_eq!(n, 64);
        Hash64(bits)
    }

    pub fn cell(self, index: usize) -> bool {
        (self.0 >> (63 - index)) & 1 == 1
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

impl fmt::Display for Hash64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Hash64 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::InvalidInput(format!("hash must be 16 hex digits: {s:?}")));
        }
        u64::from_str_radix(s, 16)
            .map(Hash64)
            .map_err(|_| Error::InvalidInput(format!("invalid hash hex: {s:?}")))
    }
}

impl Serialize for Hash64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of differing bits.
#[inline]
pub fn hamming(a: Hash64, b: Hash64) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// `cos(pi * k * (2n + 1) / 64)` for the 8 kept frequencies.
fn cosine_table() -> &'static [[f64; DCT_SIZE]; HASH_SIDE] {
    static TABLE: OnceLock<[[f64; DCT_SIZE]; HASH_SIDE]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; DCT_SIZE]; HASH_SIDE];
        for (k, row) in t.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2 * DCT_SIZE) as f64).cos();
            }
        }
        t
    })
}

/// Low-frequency 8×8 block of the unnormalized type-II 2-D DCT
/// (`X_k = 2 Σ x_n cos(π k (2n+1) / 2N)` along each axis), row-major.
pub fn dct_low_block(pixels: &[u8]) -> [f64; HASH_SIDE * HASH_SIDE] {
    assert_eq!(pixels.len(), DCT_SIZE * DCT_SIZE);
    let cos = cosine_table();
    // Down each column first (axis 0), keeping only the low frequencies.
    let mut rows = [[0.0f64; DCT_SIZE]; HASH_SIDE];
    for (k, out) in rows.iter_mut().enumerate() {
        for (n, c) in cos[k].iter().enumerate() {
            let line = &pixels[n * DCT_SIZE..(n + 1) * DCT_SIZE];
            for (x, &p) in line.iter().enumerate() {
                out[x] += 2.0 * c * p as f64;
            }
        }
    }
    let mut block = [0.0f64; HASH_SIDE * HASH_SIDE];
    for (u, line) in rows.iter().enumerate() {
        for v in 0..HASH_SIDE {
            let mut acc = 0.0;
            for (x, &val) in line.iter().enumerate() {
                acc += val * cos[v][x];
            }
            block[u * HASH_SIDE + v] = 2.0 * acc;
        }
    }
    block
}

/// Thresholds 64 coefficients against their median with a strict `>`.
pub fn median_threshold(coeffs: &[f64; 64]) -> Hash64 {
    let scale = (1u64 << COEFF_GRID_BITS) as f64;
    let q: Vec<i64> = coeffs.iter().map(|&c| (c * scale).round() as i64).collect();
    let mut sorted = q.clone();
    sorted.sort_unstable();
    // c > (a + b) / 2  <=>  2c > a + b, exact in integers.
    let twice_median = sorted[31] as i128 + sorted[32] as i128;
    Hash64::from_cells(q.iter().map(|&c| 2 * c as i128 > twice_median))
}

fn check(buf: &PixelBuffer) -> Result<()> {
    if buf.is_degenerate() {
        return Err(Error::DegenerateImage {
            width: buf.width(),
            height: buf.height(),
        });
    }
    Ok(())
}

/// DCT perceptual hash: grayscale, Lanczos downscale to 32×32, type-II DCT,
/// top-left 8×8 block (DC included) thresholded at its median.
pub fn phash(buf: &PixelBuffer) -> Result<Hash64> {
    check(buf)?;
    let small = resize_lanczos(&to_grayscale(buf), DCT_SIZE as u32, DCT_SIZE as u32);
    Ok(median_threshold(&dct_low_block(small.data())))
}

/// Difference hash: grayscale, Lanczos downscale to 9×8, bit set where a pixel
/// is brighter than its left neighbour.
pub fn dhash(buf: &PixelBuffer) -> Result<Hash64> {
    check(buf)?;
    let small = resize_lanczos(&to_grayscale(buf), HASH_SIDE as u32 + 1, HASH_SIDE as u32);
    let p = small.data();
    let w = HASH_SIDE + 1;
    Ok(Hash64::from_cells((0..HASH_SIDE).flat_map(|r| {
        (0..HASH_SIDE).map(move |c| p[r * w + c + 1] > p[r * w + c])
    })))
}

//! Antialiased Lanczos resampling with the fixed-point 8-bit arithmetic used by
//! the reference imaging library, so downscaled hash inputs agree sample for sample.

use crate::corpus::PixelBuffer;

const LANCZOS_SUPPORT: f64 = 3.0;
const PRECISION_BITS: u32 = 32 - 8 - 2;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let x = x * std::f64::consts::PI;
    x.sin() / x
}

fn lanczos(x: f64) -> f64 {
    if (-LANCZOS_SUPPORT..LANCZOS_SUPPORT).contains(&x) {
        sinc(x) * sinc(x / LANCZOS_SUPPORT)
    } else {
        0.0
    }
}

/// Per output sample: first input index and fixed-point weights.
struct Taps {
    start: Vec<usize>,
    weights: Vec<Vec<i32>>,
}

fn fixed_point(w: f64) -> i32 {
    let scaled = w * (1u32 << PRECISION_BITS) as f64;
    if w < 0.0 {
        (scaled - 0.5) as i32
    } else {
        (scaled + 0.5) as i32
    }
}

fn taps(in_size: usize, out_size: usize) -> Taps {
    let scale = in_size as f64 / out_size as f64;
    let filter_scale = scale.max(1.0);
    let support = LANCZOS_SUPPORT * filter_scale;
    let inv = 1.0 / filter_scale;

    let mut start = Vec::with_capacity(out_size);
    let mut weights = Vec::with_capacity(out_size);
    for xx in 0..out_size {
        let center = (xx as f64 + 0.5) * scale;
        let xmin = ((center - support + 0.5) as i64).max(0) as usize;
        let xmax = ((center + support + 0.5) as i64).min(in_size as i64) as usize;
        let raw: Vec<f64> = (xmin..xmax)
            .map(|x| lanczos((x as f64 - center + 0.5) * inv))
            .collect();
        let total: f64 = raw.iter().sum();
        let w = raw
            .iter()
            .map(|&k| fixed_point(if total != 0.0 { k / total } else { k }))
            .collect();
        start.push(xmin);
        weights.push(w);
    }
    Taps { start, weights }
}

#[inline]
fn clip8(acc: i64) -> u8 {
    (acc >> PRECISION_BITS).clamp(0, 255) as u8
}

/// Resizes to `out_w × out_h` with a horizontal pass followed by a vertical pass;
/// a pass is skipped when that dimension does not change.
pub fn resize_lanczos(buf: &PixelBuffer, out_w: u32, out_h: u32) -> PixelBuffer {
    let c = buf.channels() as usize;
    let (mut w, mut h) = (buf.width() as usize, buf.height() as usize);
    let mut data = buf.data().to_vec();
    let half = 1i64 << (PRECISION_BITS - 1);

    if out_w as usize != w {
        let t = taps(w, out_w as usize);
        let ow = out_w as usize;
        let mut out = vec![0u8; ow * h * c];
        for y in 0..h {
            let row = &data[y * w * c..(y + 1) * w * c];
            for x in 0..ow {
                for ch in 0..c {
                    let mut acc = half;
                    for (k, &wt) in t.weights[x].iter().enumerate() {
                        acc += row[(t.start[x] + k) * c + ch] as i64 * wt as i64;
                    }
                    out[(y * ow + x) * c + ch] = clip8(acc);
                }
            }
        }
        data = out;
        w = ow;
    }

    if out_h as usize != h {
        let t = taps(h, out_h as usize);
        let oh = out_h as usize;
        let mut out = vec![0u8; w * oh * c];
        for y in 0..oh {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = half;
                    for (k, &wt) in t.weights[y].iter().enumerate() {
                        acc += data[((t.start[y] + k) * w + x) * c + ch] as i64 * wt as i64;
                    }
                    out[(y * w + x) * c + ch] = clip8(acc);
                }
            }
        }
        data = out;
        h = oh;
    }

    PixelBuffer::new(w as u32, h as u32, c as u8, data).expect("resampled dimensions are consistent")
}

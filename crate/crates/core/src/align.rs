//! Five-point face alignment onto the 112×112 ArcFace template.

use serde::{Deserialize, Serialize};

use crate::corpus::PixelBuffer;
use crate::error::{Error, Result};

pub const ALIGNED_SIZE: u32 = 112;

/// ArcFace destination landmarks for a 112×112 crop: left eye, right eye, nose
/// tip, left mouth corner, right mouth corner.
pub const ARCFACE_TEMPLATE: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

/// Relative eigenvalue floor of the landmark scatter below which the points
/// count as collinear.
pub const COLLINEAR_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub landmarks: [[f64; 2]; 5],
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let [_, _, w, h] = self.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidInput(format!("bounding box must have positive size, got {w}x{h}")));
        }
        Ok(())
    }

    fn center(&self) -> (f64, f64) {
        let [x, y, w, h] = self.bbox;
        (x + w / 2.0, y + h / 2.0)
    }
}

/// Primary-face score: normalized box area + center proximity + confidence, each
/// term weighted equally.
pub fn primary_face_score(d: &Detection, image_w: u32, image_h: u32) -> f64 {
    let (iw, ih) = (image_w as f64, image_h as f64);
    let [_, _, w, h] = d.bbox;
    let area = (w * h) / (iw * ih);
    let (cx, cy) = d.center();
    let dist = (cx - iw / 2.0).hypot(cy - ih / 2.0);
    let dist_max = (iw / 2.0).hypot(ih / 2.0);
    let proximity = 1.0 - dist / dist_max;
    area + proximity + d.confidence
}

/// Index of the primary face; the earliest detection wins ties.
pub fn select_primary_face(detections: &[Detection], image_w: u32, image_h: u32) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in detections.iter().enumerate() {
        let s = primary_face_score(d, image_w, image_h);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoFace)
}

/// `[[a, -b, tx], [b, a, ty]]`: scale·rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub matrix: [[f64; 3]; 2],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self::from_params(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_params(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (a, b) = (scale * angle.cos(), scale * angle.sin());
        SimilarityTransform {
            matrix: [[a, -b, tx], [b, a, ty]],
        }
    }

    pub fn scale(&self) -> f64 {
        self.matrix[0][0].hypot(self.matrix[1][0])
    }

    pub fn angle(&self) -> f64 {
        self.matrix[1][0].atan2(self.matrix[0][0])
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.matrix[0][2], self.matrix[1][2])
    }

    /// Determinant of the linear part; always positive for a similarity.
    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let s = self.scale();
        let (tx, ty) = self.translation();
        let inv = Self::from_params(1.0 / s, -self.angle(), 0.0, 0.0);
        let [ix, iy] = inv.apply([tx, ty]);
        let mut m = inv.matrix;
        m[0][2] = -ix;
        m[1][2] = -iy;
        SimilarityTransform { matrix: m }
    }
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama's estimator
/// restricted to proper rotations; in two dimensions it has a closed form).
pub fn umeyama_similarity(src: &[[f64; 2]; 5], dst: &[[f64; 2]; 5]) -> Result<SimilarityTransform> {
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 2]; 5]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    };
    let (ms, md) = (mean(src), mean(dst));

    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (x, y) = (s[0] - ms[0], s[1] - ms[1]);
        let (u, v) = (d[0] - md[0], d[1] - md[1]);
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        dot += x * u + y * v;
        cross += x * v - y * u;
    }
    if !(sxx + syy).is_finite() || sxx + syy == 0.0 {
        return Err(Error::Alignment("landmarks are coincident"));
    }
    // Eigenvalues of the 2×2 scatter matrix.
    let half_trace = (sxx + syy) / 2.0;
    let disc = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let (lmax, lmin) = (half_trace + disc, half_trace - disc);
    if lmin <= COLLINEAR_TOLERANCE * lmax {
        return Err(Error::Alignment("landmarks are collinear"));
    }

    let norm = sxx + syy;
    let (a, b) = (dot / norm, cross / norm);
    let tx = md[0] - (a * ms[0] - b * ms[1]);
    let ty = md[1] - (b * ms[0] + a * ms[1]);
    Ok(SimilarityTransform {
        matrix: [[a, -b, tx], [b, a, ty]],
    })
}

/// Samples a 112×112 RGB crop: every output pixel is mapped back through the
/// inverse transform and bilinearly interpolated; samples outside the source are
/// black.
pub fn warp_to_template(buf: &PixelBuffer, t: &SimilarityTransform) -> PixelBuffer {
    let inv = t.inverse();
    let (w, h) = (buf.width() as i64, buf.height() as i64);
    let c = buf.channels() as usize;
    let src = buf.data();
    let sample = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            return 0.0;
        }
        let i = (y as usize * w as usize + x as usize) * c;
        src[i + if c == 3 { ch } else { 0 }] as f64
    };

    let side = ALIGNED_SIZE as usize;
    let mut out = Vec::with_capacity(side * side * 3);
    for oy in 0..side {
        for ox in 0..side {
            let [sx, sy] = inv.apply([ox as f64, oy as f64]);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..3 {
                let top = sample(x0, y0, ch) * (1.0 - fx) + sample(x0 + 1, y0, ch) * fx;
                let bottom = sample(x0, y0 + 1, ch) * (1.0 - fx) + sample(x0 + 1, y0 + 1, ch) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    PixelBuffer::new(ALIGNED_SIZE, ALIGNED_SIZE, 3, out).expect("fixed output size")
}

/// Why an image could not be aligned; written to the skip list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoFeatures,
    NoFace,
    AlignmentFailed,
    DecodeFailed,
}

impl SkipReason {
    pub fn code(self) -> &'static str {
        match self {
            SkipReason::NoFeatures => "no-features",
            SkipReason::NoFace => "no-face",
            SkipReason::AlignmentFailed => "alignment-failed",
            SkipReason::DecodeFailed => "decode-failed",
        }
    }
}

/// Selects the primary face and warps it onto the template.
pub fn align_face(buf: &PixelBuffer, detections: &[Detection]) -> std::result::Result<PixelBuffer, SkipReason> {
    let idx = select_primary_face(detections, buf.width(), buf.height()).map_err(|_| SkipReason::NoFace)?;
    let t = umeyama_similarity(&detections[idx].landmarks, &ARCFACE_TEMPLATE)
        .map_err(|_| SkipReason::AlignmentFailed)?;
    Ok(warp_to_template(buf, &t))
}

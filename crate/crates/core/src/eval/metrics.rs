//! Verification error rates over scored pairs. A comparison is accepted as a
//! match when its score is at or above the threshold.

use serde::{Deserialize, Serialize};

use super::ScoredPair;
use crate::error::{Error, Result};
use crate::features::Quality;

/// Error rates at every candidate threshold: each distinct score in ascending
/// order, then `+inf` (nothing accepted).
#[derive(Debug, Clone, PartialEq)]
pub struct RateSweep {
    pub thresholds: Vec<f64>,
    pub fmr: Vec<f64>,
    pub fnmr: Vec<f64>,
    pub mated: usize,
    pub nonmated: usize,
}

impl RateSweep {
    pub fn new(pairs: &[ScoredPair]) -> Result<Self> {
        let mut scores: Vec<(f64, bool)> = pairs.iter().map(|p| (p.score, p.mated)).collect();
        if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite score for pair {} / {}", p.a, p.b)));
        }
        let mated = scores.iter().filter(|s| s.1).count();
        let nonmated = scores.len() - mated;
        if mated == 0 || nonmated == 0 {
            return Err(Error::InvalidInput(format!(
                "both classes are required, got {mated} mated and {nonmated} non-mated pairs"
            )));
        }
        scores.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut sweep = RateSweep {
            thresholds: Vec::new(),
            fmr: Vec::new(),
            fnmr: Vec::new(),
            mated,
            nonmated,
        };
        // Counts of scores strictly below the current threshold.
        let (mut below_m, mut below_n) = (0usize, 0usize);
        let mut i = 0;
        while i < scores.len() {
            let t = scores[i].0;
            sweep.push(t, below_m, below_n);
            while i < scores.len() && scores[i].0 == t {
                if scores[i].1 {
                    below_m += 1;
                } else {
                    below_n += 1;
                }
                i += 1;
            }
        }
        sweep.push(f64::INFINITY, below_m, below_n);
        Ok(sweep)
    }

    fn push(&mut self, t: f64, below_m: usize, below_n: usize) {
        self.thresholds.push(t);
        self.fnmr.push(below_m as f64 / self.mated as f64);
        self.fmr.push((self.nonmated - below_n) as f64 / self.nonmated as f64);
    }
}

/// Equal error rate: the crossing of FMR and FNMR, linearly interpolated
/// between the two bracketing thresholds of the sweep.
pub fn eer(pairs: &[ScoredPair]) -> Result<f64> {
    let s = RateSweep::new(pairs)?;
    let d = |k: usize| s.fmr[k] - s.fnmr[k];
    // d(0) = FMR ≥ 0 and d(last) = -1, so a crossing always exists.
    let k = (0..s.thresholds.len()).find(|&k| d(k) <= 0.0).expect("the sweep ends with d = -1");
    if d(k) == 0.0 || k == 0 {
        return Ok(s.fmr[k]);
    }
    let alpha = d(k - 1) / (d(k - 1) - d(k));
    Ok(s.fmr[k - 1] + alpha * (s.fmr[k] - s.fmr[k - 1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_fmr: f64,
    pub threshold: f64,
    pub fnmr: f64,
    /// Empirical FMR at the threshold.
    pub fmr: f64,
    /// The target is below the resolution `1 / #non-mated`.
    pub below_resolution: bool,
}

/// FNMR at the lowest threshold whose empirical FMR does not exceed the target.
pub fn fnmr_at_fmr(pairs: &[ScoredPair], target_fmr: f64) -> Result<OperatingPoint> {
    if !(0.0..=1.0).contains(&target_fmr) {
        return Err(Error::InvalidInput(format!("target FMR {target_fmr} is outside [0, 1]")));
    }
    let s = RateSweep::new(pairs)?;
    let k = s.fmr.iter().position(|&f| f <= target_fmr).expect("FMR is 0 at +inf");
    let below_resolution = target_fmr < 1.0 / s.nonmated as f64;
    if below_resolution {
        log::warn!("target FMR {target_fmr} is below 1/{} non-mated pairs", s.nonmated);
    }
    Ok(OperatingPoint {
        target_fmr,
        threshold: s.thresholds[k],
        fnmr: s.fnmr[k],
        fmr: s.fmr[k],
        below_resolution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdcError {
    Fnmr,
    Fmr,
}

/// Error versus discard characteristic as a polyline of
/// `(discard_fraction, error)` points. The error is constant between discard
/// steps, so every step contributes a horizontal and a vertical segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdcCurve {
    pub points: Vec<(f64, f64)>,
}

/// Discards pairs of the relevant class (mated for FNMR, non-mated for FMR) in
/// ascending order of pair quality, a whole group of equal qualities at a time,
/// and records the error of the retained pairs at a fixed threshold.
pub fn edc(pairs: &[ScoredPair], threshold: f64, kind: EdcError) -> Result<EdcCurve> {
    let mut class: Vec<(Quality, bool)> = pairs
        .iter()
        .filter(|p| p.mated == (kind == EdcError::Fnmr))
        .map(|p| {
            let error = match kind {
                EdcError::Fnmr => p.score < threshold,
                EdcError::Fmr => p.score >= threshold,
            };
            (p.pair_quality, error)
        })
        .collect();
    if class.is_empty() {
        return Err(Error::InvalidInput("no pairs of the class the error is measured on".into()));
    }
    class.sort_by_key(|c| c.0);
    let n = class.len();
    let mut errors_retained = class.iter().filter(|c| c.1).count();
    let mut points = vec![(0.0, errors_retained as f64 / n as f64)];
    let mut i = 0;
    while i < n {
        let q = class[i].0;
        while i < n && class[i].0 == q {
            errors_retained -= class[i].1 as usize;
            i += 1;
        }
        let f = i as f64 / n as f64;
        let previous = points.last().expect("non-empty").1;
        points.push((f, previous));
        if i < n {
            points.push((f, errors_retained as f64 / (n - i) as f64));
        }
    }
    Ok(EdcCurve { points })
}

/// Area under the curve over `[lo, hi]` divided by `hi - lo`.
pub fn pauc(curve: &EdcCurve, lo: f64, hi: f64) -> Result<f64> {
    let end = curve.points.last().map_or(0.0, |p| p.0);
    if lo.is_nan() || hi.is_nan() || lo >= hi || lo < 0.0 || hi > end {
        return Err(Error::InvalidInput(format!("range [{lo}, {hi}] is empty or outside [0, {end}]")));
    }
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let (a, b) = (x0.max(lo), x1.min(hi));
        if b <= a {
            continue;
        }
        let at = |x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        area += (b - a) * (at(a) + at(b)) / 2.0;
    }
    Ok(area / (hi - lo))
}

//! Verification and quality-assessment evaluation of a dataset variant.

mod metrics;

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageId, Manifest};
use crate::error::{Error, Result};
use crate::features::{cosine_similarity, FeatureStore, Quality};

pub use metrics::{eer, edc, fnmr_at_fmr, pauc, EdcCurve, EdcError, OperatingPoint, RateSweep};

/// Operating point used as the fixed comparison threshold of EDC curves.
pub const EDC_THRESHOLD_FMR: f64 = 1e-3;
/// Discard fraction range of the reported partial areas.
pub const PAUC_RANGE: (f64, f64) = (0.0, 0.2);

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub a: ImageId,
    pub b: ImageId,
    pub mated: bool,
    pub score: f64,
    /// Lower of the two image qualities.
    pub pair_quality: Quality,
}

/// Pairs each image with the next one, and the last with the first when there
/// are more than two images.
pub fn circular_mated_pairs<T: Clone>(images: &[T]) -> Vec<(T, T)> {
    let n = images.len();
    match n {
        0 | 1 => Vec::new(),
        2 => vec![(images[0].clone(), images[1].clone())],
        _ => (0..n).map(|i| (images[i].clone(), images[(i + 1) % n].clone())).collect(),
    }
}

/// Circular mated pairs of every subject, images in path order.
pub fn mated_pairs(manifest: &Manifest) -> Vec<(ImageId, ImageId)> {
    manifest
        .by_subject()
        .values()
        .flat_map(|records| {
            let ids: Vec<ImageId> = records.iter().map(|r| r.image_id.clone()).collect();
            circular_mated_pairs(&ids)
        })
        .collect()
}

/// `n` distinct unordered pairs of images from different subjects, drawn
/// uniformly with a seeded generator and returned in manifest order.
pub fn sample_nonmated(manifest: &Manifest, n: usize, seed: u64) -> Result<Vec<(ImageId, ImageId)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let records = manifest.records();
    let subject_of: Vec<usize> = {
        let subjects: Vec<_> = manifest.by_subject().into_keys().collect();
        records
            .iter()
            .map(|r| subjects.binary_search(&r.subject()).expect("subject present"))
            .collect()
    };
    let total_images = records.len() as u128;
    let same: u128 = manifest
        .by_subject()
        .values()
        .map(|v| (v.len() as u128) * (v.len() as u128 - 1) / 2)
        .sum();
    let available = total_images * total_images.saturating_sub(1) / 2 - same;
    if (n as u128) > available {
        return Err(Error::InvalidInput(format!(
            "{n} non-mated pairs requested but only {available} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = if (n as u128) * 2 > available {
        let mut all: Vec<(usize, usize)> = (0..records.len())
            .flat_map(|i| (i + 1..records.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| subject_of[i] != subject_of[j])
            .collect();
        all.shuffle(&mut rng);
        all.truncate(n);
        all
    } else {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        let len = records.len();
        while out.len() < n {
            let i = rng.random_range(0..len);
            let j = rng.random_range(0..len);
            if subject_of[i] == subject_of[j] {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out
    };
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|(i, j)| (records[i].image_id.clone(), records[j].image_id.clone()))
        .collect())
}

/// Scores pairs in parallel; every image needs an embedding.
pub fn score_pairs(pairs: &[(ImageId, ImageId)], mated: bool, store: &FeatureStore) -> Result<Vec<ScoredPair>> {
    pairs
        .par_iter()
        .map(|(a, b)| {
            let emb = |id: &ImageId| {
                store
                    .embedding(id)
                    .ok_or_else(|| Error::Inconsistent(format!("{id} has no embedding")))
            };
            Ok(ScoredPair {
                a: a.clone(),
                b: b.clone(),
                mated,
                score: cosine_similarity(emb(a)?, emb(b)?)?,
                pair_quality: store.quality(a).min(store.quality(b)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalVariant {
    Original,
    Full,
    Preservative,
}

impl EvalVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalVariant::Original => "original",
            EvalVariant::Full => "full",
            EvalVariant::Preservative => "preservative",
        }
    }
}

impl std::str::FromStr for EvalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(EvalVariant::Original),
            "full" => Ok(EvalVariant::Full),
            "preservative" => Ok(EvalVariant::Preservative),
            _ => Err(Error::Config(format!("unknown evaluation variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub variant: EvalVariant,
    pub images: usize,
    /// Images left out because they have no embedding.
    pub excluded_images: usize,
    pub mated_pairs: usize,
    pub nonmated_pairs: usize,
    pub eer: f64,
    pub fnmr_at_1e3: OperatingPoint,
    pub fnmr_at_1e2: OperatingPoint,
    pub edc_threshold: f64,
    pub pauc_fnmr: f64,
    pub pauc_fmr: f64,
}

/// Evaluates one dataset variant: circular mated pairs, as many sampled
/// non-mated pairs, and the derived metrics. Images without an embedding
/// (including detection failures) are excluded first.
pub fn evaluate(
    dataset: &str,
    variant: EvalVariant,
    manifest: &Manifest,
    store: &FeatureStore,
    seed: u64,
) -> Result<MetricsRow> {
    let usable = manifest.filtered(|r| store.embedding(&r.image_id).is_some() && !store.is_landmark_failure(&r.image_id));
    let mated_ids = mated_pairs(&usable);
    let nonmated_ids = sample_nonmated(&usable, mated_ids.len(), seed)?;
    let mut pairs = score_pairs(&mated_ids, true, store)?;
    pairs.extend(score_pairs(&nonmated_ids, false, store)?);

    let fnmr_at_1e3 = fnmr_at_fmr(&pairs, EDC_THRESHOLD_FMR)?;
    let fnmr_at_1e2 = fnmr_at_fmr(&pairs, 1e-2)?;
    let threshold = fnmr_at_1e3.threshold;
    let (lo, hi) = PAUC_RANGE;
    Ok(MetricsRow {
        dataset: dataset.to_owned(),
        variant,
        images: usable.len(),
        excluded_images: manifest.len() - usable.len(),
        mated_pairs: mated_ids.len(),
        nonmated_pairs: nonmated_ids.len(),
        eer: eer(&pairs)?,
        fnmr_at_1e3,
        fnmr_at_1e2,
        edc_threshold: threshold,
        pauc_fnmr: pauc(&edc(&pairs, threshold, EdcError::Fnmr)?, lo, hi)?,
        pauc_fmr: pauc(&edc(&pairs, threshold, EdcError::Fmr)?, lo, hi)?,
    })
}

pub const METRICS_HEADER: &str = "dataset,variant,eer,fnmr@1e-3,fnmr@1e-2,pauc_fnmr,pauc_fmr";

/// CSV rows in the order given, preceded by [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.dataset,
            r.variant.as_str(),
            r.eer,
            r.fnmr_at_1e3.fnmr,
            r.fnmr_at_1e2.fnmr,
            r.pauc_fnmr,
            r.pauc_fmr
        );
    }
    out
}

//! Exact and near duplicate detection.

pub mod cache;
pub mod crop_resistant;
pub mod digest;
pub mod perceptual;
pub mod resample;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageId;
use crate::error::{Error, Result};
use crate::unionfind::UnionFind;

pub use cache::HashCache;
pub use crop_resistant::{crop_resistant_hash, multihash_match, CropResistantParams, MultiHash, SegmentHash};
pub use digest::{content_digest, find_exact_groups, verify_exact_group, ContentDigest, DIGEST_ALGORITHM};
pub use perceptual::{dhash, hamming, phash, Hash64};

/// Bumped whenever a change alters any hash value; cached hashes from another
/// version are discarded.
pub const HASH_ALGORITHM_VERSION: &str = "facedup-hash-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DupSource {
    Exact,
    Phash,
    CropResistant,
}

impl DupSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DupSource::Exact => "exact",
            DupSource::Phash => "phash",
            DupSource::CropResistant => "crop_resistant",
        }
    }
}

impl FromStr for DupSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(DupSource::Exact),
            "phash" => Ok(DupSource::Phash),
            "crop_resistant" => Ok(DupSource::CropResistant),
            _ => Err(Error::InvalidInput(format!("unknown duplicate source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageVariant {
    Original,
    Preprocessed,
}

impl ImageVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageVariant::Original => "original",
            ImageVariant::Preprocessed => "preprocessed",
        }
    }
}

impl fmt::Display for ImageVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(ImageVariant::Original),
            "preprocessed" => Ok(ImageVariant::Preprocessed),
            _ => Err(Error::InvalidInput(format!("unknown image variant {s:?}"))),
        }
    }
}

/// A group of at least two images found by one detector on one image variant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RawDupSet {
    pub source: DupSource,
    pub variant: ImageVariant,
    /// Ascending.
    pub members: Vec<ImageId>,
}

impl RawDupSet {
    pub fn new(source: DupSource, variant: ImageVariant, mut members: Vec<ImageId>) -> Self {
        members.sort();
        members.dedup();
        debug_assert!(members.len() >= 2);
        RawDupSet {
            source,
            variant,
            members,
        }
    }

    /// `source \t variant \t member \t member ...`
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}", self.source.as_str(), self.variant.as_str());
        for m in &self.members {
            s.push('\t');
            s.push_str(m.as_str());
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = line.split('\t');
        let source = fields.next().unwrap_or_default().parse()?;
        let variant = fields
            .next()
            .ok_or_else(|| Error::InvalidInput("missing variant".into()))?
            .parse()?;
        let members: Vec<ImageId> = fields.map(ImageId::from_raw).collect();
        if members.len() < 2 {
            return Err(Error::InvalidInput("duplicate set needs at least two members".into()));
        }
        Ok(RawDupSet::new(source, variant, members))
    }
}

pub fn write_sets(sets: &[RawDupSet]) -> String {
    sets.iter().map(|s| s.to_line() + "\n").collect()
}

pub fn parse_sets(text: &str, path: &std::path::Path) -> Result<Vec<RawDupSet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            RawDupSet::parse_line(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Hashes of one image variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEntry {
    pub digest: ContentDigest,
    pub phash: Hash64,
    pub multihash: MultiHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashConfig {
    pub exact: bool,
    pub phash: bool,
    /// Largest Hamming distance at which two pHashes are grouped; 0 means equality.
    pub max_phash_distance: u32,
    pub crop_resistant: bool,
    pub crop: CropResistantParams,
    pub region_cutoff: usize,
    pub bit_error_rate: f64,
    /// Crop-resistant candidates are only compared when they share the leading
    /// `bucket_prefix_bits` bits of at least one segment hash (0 compares all pairs).
    pub bucket_prefix_bits: u32,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig {
            exact: true,
            phash: true,
            max_phash_distance: 0,
            crop_resistant: true,
            crop: CropResistantParams::default(),
            region_cutoff: 1,
            bit_error_rate: 0.25,
            bucket_prefix_bits: 8,
        }
    }
}

impl HashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_phash_distance > 64 {
            return Err(Error::Config("max_phash_distance must be in [0, 64]".into()));
        }
        if self.region_cutoff == 0 {
            return Err(Error::Config("region_cutoff must be positive".into()));
        }
        if !(self.bit_error_rate > 0.0 && self.bit_error_rate <= 1.0) {
            return Err(Error::Config("bit_error_rate must be in (0, 1]".into()));
        }
        if self.bucket_prefix_bits > 64 {
            return Err(Error::Config("bucket_prefix_bits must be in [0, 64]".into()));
        }
        Ok(())
    }
}

fn components(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for (a, b) in pairs {
        uf.union(a, b);
    }
    uf.groups(2)
}

/// Index pairs `(i, j)`, `i < j`, whose hashes are within `max_distance`.
pub fn phash_pairs(hashes: &[Hash64], max_distance: u32) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if max_distance == 0 {
        let mut order: Vec<usize> = (0..hashes.len()).collect();
        order.sort_by_key(|&i| (hashes[i], i));
        for run in order.chunk_by(|&a, &b| hashes[a] == hashes[b]) {
            for w in run.windows(2) {
                pairs.push((w[0].min(w[1]), w[0].max(w[1])));
            }
        }
        return pairs;
    }
    if max_distance >= 16 {
        for i in 0..hashes.len() {
            for j in i + 1..hashes.len() {
                if hamming(hashes[i], hashes[j]) <= max_distance {
                    pairs.push((i, j));
                }
            }
        }
        return pairs;
    }
    // Pigeonhole: split into max_distance + 1 chunks; any pair within distance
    // shares at least one chunk exactly.
    let chunks = max_distance as usize + 1;
    let mut bounds = Vec::with_capacity(chunks + 1);
    for c in 0..=chunks {
        bounds.push(c * 64 / chunks);
    }
    let mut candidates = BTreeSet::new();
    for c in 0..chunks {
        let (lo, hi) = (bounds[c], bounds[c + 1]);
        let mask = if hi - lo == 64 { u64::MAX } else { ((1u64 << (hi - lo)) - 1) << lo };
        let mut buckets: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, h) in hashes.iter().enumerate() {
            buckets.entry(h.0 & mask).or_default().push(i);
        }
        for members in buckets.values().filter(|m| m.len() >= 2) {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    candidates.insert((i, j));
                }
            }
        }
    }
    pairs.extend(
        candidates
            .into_iter()
            .filter(|&(i, j)| hamming(hashes[i], hashes[j]) <= max_distance),
    );
    pairs
}

/// Index pairs whose multi-hashes match, restricted to prefix buckets.
pub fn crop_resistant_pairs(multis: &[MultiHash], config: &HashConfig) -> Vec<(usize, usize)> {
    let bits = config.bucket_prefix_bits;
    let key = |h: Hash64| if bits == 0 { 0 } else { h.0 >> (64 - bits) };
    let mut buckets: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
    for (i, m) in multis.iter().enumerate() {
        for &h in &m.segments {
            buckets.entry(key(h)).or_default().insert(i);
        }
    }
    let mut candidates = BTreeSet::new();
    for members in buckets.values().filter(|m| m.len() >= 2) {
        let members: Vec<usize> = members.iter().copied().collect();
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                candidates.insert((i, j));
            }
        }
    }
    candidates
        .into_iter()
        .filter(|&(i, j)| multihash_match(&multis[i], &multis[j], config.region_cutoff, config.bit_error_rate))
        .collect()
}

/// Runs the enabled detectors over hashed images of one variant.
///
/// Subject labels play no part here. `read` supplies the bytes that exact
/// candidates are verified against (file contents for originals, pixel data for
/// aligned crops). Output is canonical: members ascending, sets sorted.
pub fn find_duplicate_sets<F>(
    entries: &[(ImageId, HashEntry)],
    variant: ImageVariant,
    config: &HashConfig,
    read: F,
) -> Result<Vec<RawDupSet>>
where
    F: FnMut(&ImageId) -> Result<Vec<u8>>,
{
    let mut entries: Vec<&(ImageId, HashEntry)> = entries.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let ids: Vec<&ImageId> = entries.iter().map(|(id, _)| id).collect();
    let to_set = |source, group: Vec<usize>| {
        RawDupSet::new(source, variant, group.into_iter().map(|i| ids[i].clone()).collect())
    };

    let mut sets = Vec::new();
    if config.exact {
        let items: Vec<(ImageId, ContentDigest)> =
            entries.iter().map(|(id, e)| (id.clone(), e.digest)).collect();
        let (groups, _) = find_exact_groups(&items, read)?;
        sets.extend(groups.into_iter().map(|g| RawDupSet::new(DupSource::Exact, variant, g)));
    }
    if config.phash {
        let hashes: Vec<Hash64> = entries.iter().map(|(_, e)| e.phash).collect();
        let pairs = phash_pairs(&hashes, config.max_phash_distance);
        sets.extend(components(ids.len(), pairs).into_iter().map(|g| to_set(DupSource::Phash, g)));
    }
    if config.crop_resistant {
        let multis: Vec<MultiHash> = entries.iter().map(|(_, e)| e.multihash.clone()).collect();
        let pairs = crop_resistant_pairs(&multis, config);
        sets.extend(
            components(ids.len(), pairs)
                .into_iter()
                .map(|g| to_set(DupSource::CropResistant, g)),
        );
    }
    sets.sort();
    Ok(sets)
}

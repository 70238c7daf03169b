//! End-to-end commands over a run directory: scan, dedup, apply, eval, report.
//!
//! Files in `output_dir`:
//!
//! | file | content |
//! |---|---|
//! | `manifest.tsv` | ingested images |
//! | `skipped_files.tsv` | files not ingested, `dataset \t path \t reason` |
//! | `skip_list.tsv` | `image_id \t variant \t reason` for undecodable images and failed alignments |
//! | `hash_cache.tsv` | resumable per-image hashes |
//! | `dup_sets.tsv` | raw duplicate sets |
//! | `scan_report.json` | scan counters |
//! | `plan/` | `removed.txt`, `moved.txt`, `actions.tsv`, `report.json` |
//! | `deduplicated_manifest.tsv` | manifest after `apply` |
//! | `eval/metrics.csv`, `eval/metrics.json` | verification and EDC metrics |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::align_face;
use crate::corpus::{build_manifest, decode_canonical, DatasetRoots, ImageId, Layout, Manifest, PixelBuffer};
use crate::dedup::{apply_plan, build_plan, ApplyMode, DedupConfig, DedupMode, DedupPlan, DedupReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metrics_csv, EvalVariant, MetricsRow};
use crate::features::FeatureStore;
use crate::hashing::{
    content_digest, crop_resistant_hash, find_duplicate_sets, parse_sets, phash, write_sets, ContentDigest,
    HashCache, HashConfig, HashEntry, ImageVariant, MultiHash, RawDupSet, DIGEST_ALGORITHM, HASH_ALGORITHM_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantToggles {
    pub original: bool,
    /// Aligned face crops; needs detections from a feature sidecar.
    pub preprocessed: bool,
}

impl Default for VariantToggles {
    fn default() -> Self {
        VariantToggles {
            original: true,
            preprocessed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset id to root directory.
    pub datasets: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    /// Feature sidecars, later files overriding earlier ones.
    pub sidecars: Vec<PathBuf>,
    /// Files listing image ids (one per line) that are never ingested.
    pub exclude_lists: Vec<PathBuf>,
    /// 0 uses every available core.
    pub workers: usize,
    pub use_cache: bool,
    pub variants: VariantToggles,
    pub hash: HashConfig,
    pub dedup: DedupConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: BTreeMap::new(),
            output_dir: PathBuf::from("facedup-out"),
            sidecars: Vec::new(),
            exclude_lists: Vec::new(),
            workers: 0,
            use_cache: true,
            variants: VariantToggles::default(),
            hash: HashConfig::default(),
            dedup: DedupConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        self.dedup.validate()?;
        if !self.variants.original && !self.variants.preprocessed {
            return Err(Error::Config("at least one image variant must be enabled".into()));
        }
        Ok(())
    }

    pub fn roots(&self) -> DatasetRoots {
        DatasetRoots::new(self.datasets.iter().map(|(k, v)| (k.clone(), v.clone())))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))
    }

    fn features(&self) -> Result<FeatureStore> {
        FeatureStore::load(&self.sidecars)
    }
}

/// An image left out of one variant, or of everything when undecodable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipEntry {
    pub image_id: ImageId,
    pub variant: ImageVariant,
    pub reason: String,
}

fn write_skip_list(entries: &[SkipEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{}\t{}\t{}", e.image_id, e.variant, e.reason);
    }
    out
}

fn parse_skip_list(path: &Path) -> Result<Vec<SkipEntry>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |reason: String| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            reason,
        };
        if f.len() != 3 {
            return Err(err("expected 3 tab-separated fields".into()));
        }
        out.push(SkipEntry {
            image_id: ImageId::from_raw(f[0]),
            variant: f[1].parse().map_err(|e: Error| err(e.to_string()))?,
            reason: f[2].to_owned(),
        });
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub digest_algorithm: String,
    pub hash_algorithm: String,
    pub images: usize,
    pub skipped_files: usize,
    pub undecodable_images: usize,
    pub preprocessed_skipped: BTreeMap<String, usize>,
    pub cache_hits_original: usize,
    pub cache_hits_preprocessed: usize,
    pub sets_original: usize,
    pub sets_preprocessed: usize,
    pub warnings: Vec<String>,
}

/// What hashing one image produced for each variant.
struct ImageHashes {
    original: std::result::Result<(HashEntry, bool), String>,
    preprocessed: Option<std::result::Result<(HashEntry, bool), String>>,
}

fn hash_pixels(buf: &PixelBuffer, digest: ContentDigest, config: &HashConfig) -> Result<HashEntry> {
    let multihash = if config.crop_resistant {
        crop_resistant_hash(buf, &config.crop)?
    } else {
        MultiHash::default()
    };
    Ok(HashEntry {
        digest,
        phash: phash(buf)?,
        multihash,
    })
}

fn aligned_crop(buf: &PixelBuffer, store: &FeatureStore, id: &ImageId) -> std::result::Result<PixelBuffer, String> {
    match &store.get(id).detections {
        None => Err(crate::align::SkipReason::NoFeatures.code().to_owned()),
        Some(d) => align_face(buf, d).map_err(|r| r.code().to_owned()),
    }
}

fn hash_image(
    id: &ImageId,
    path: &Path,
    config: &RunConfig,
    cache: &HashCache,
    store: &FeatureStore,
) -> Result<ImageHashes> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = content_digest(&bytes);
    let cached = cache
        .get(id, ImageVariant::Original)
        .filter(|e| e.digest == digest)
        .cloned();
    let cached_pre = cached
        .as_ref()
        .and_then(|_| cache.get(id, ImageVariant::Preprocessed))
        .cloned();
    let want_pre = config.variants.preprocessed;

    let mut decoded: Option<std::result::Result<PixelBuffer, String>> = None;
    let mut decode = || -> std::result::Result<PixelBuffer, String> {
        decoded
            .get_or_insert_with(|| decode_canonical(id, &bytes).map_err(|_| "decode-failed".to_owned()))
            .clone()
    };

    let original = match cached {
        Some(e) => Ok((e, true)),
        None => decode().and_then(|buf| {
            hash_pixels(&buf, digest, &config.hash)
                .map(|e| (e, false))
                .map_err(|e| match e {
                    Error::DegenerateImage { .. } => "degenerate-image".to_owned(),
                    other => format!("hash-failed: {other}"),
                })
        }),
    };
    let preprocessed = if !want_pre || original.is_err() {
        None
    } else {
        Some(match cached_pre {
            Some(e) => Ok((e, true)),
            None => decode()
                .and_then(|buf| aligned_crop(&buf, store, id))
                .and_then(|crop| {
                    hash_pixels(&crop, content_digest(crop.data()), &config.hash)
                        .map(|e| (e, false))
                        .map_err(|_| "degenerate-image".to_owned())
                }),
        })
    };
    Ok(ImageHashes { original, preprocessed })
}

/// Ingests the datasets, hashes every image (reusing the cache), detects raw
/// duplicate sets for the enabled variants and writes the scan outputs.
pub fn cmd_scan(config: &RunConfig) -> Result<ScanReport> {
    config.validate()?;
    if config.datasets.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let roots = config.roots();
    let mut exclude = BTreeSet::new();
    for p in &config.exclude_lists {
        exclude.extend(read_text(p)?.lines().filter(|l| !l.is_empty()).map(ImageId::from_raw));
    }
    let outcome = build_manifest(&roots, Layout::SubjectPerDirectory, &exclude)?;
    let manifest = outcome.manifest;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    manifest.save(&config.path("manifest.tsv"))?;
    let mut skipped_text = String::new();
    for s in &outcome.skipped {
        let _ = writeln!(skipped_text, "{}\t{}\t{}", s.dataset_id, s.path, s.reason);
    }
    write_text(&config.path("skipped_files.tsv"), &skipped_text)?;

    let cache_path = config.path("hash_cache.tsv");
    let cache = if config.use_cache {
        HashCache::load(&cache_path)?
    } else {
        HashCache::default()
    };
    let store = config.features()?;
    let mut report = ScanReport {
        digest_algorithm: DIGEST_ALGORITHM.into(),
        hash_algorithm: HASH_ALGORITHM_VERSION.into(),
        images: manifest.len(),
        skipped_files: outcome.skipped.len(),
        warnings: store.warnings().to_vec(),
        ..Default::default()
    };
    if config.variants.preprocessed && config.sidecars.is_empty() {
        report
            .warnings
            .push("no feature sidecar configured; every image is skipped in the preprocessed variant".into());
    }

    let pool = config.pool()?;
    let hashed: Vec<ImageHashes> = pool.install(|| {
        manifest
            .records()
            .par_iter()
            .map(|r| hash_image(&r.image_id, &roots.resolve(r)?, config, &cache, &store))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut new_cache = HashCache::default();
    let mut skips = Vec::new();
    let mut original_entries = Vec::new();
    let mut pre_entries = Vec::new();
    for (r, h) in manifest.records().iter().zip(hashed) {
        let id = &r.image_id;
        match h.original {
            Ok((e, hit)) => {
                report.cache_hits_original += hit as usize;
                new_cache.insert(id.clone(), ImageVariant::Original, e.clone());
                original_entries.push((id.clone(), e));
            }
            Err(reason) => {
                report.undecodable_images += 1;
                skips.push(SkipEntry {
                    image_id: id.clone(),
                    variant: ImageVariant::Original,
                    reason,
                });
            }
        }
        match h.preprocessed {
            Some(Ok((e, hit))) => {
                report.cache_hits_preprocessed += hit as usize;
                new_cache.insert(id.clone(), ImageVariant::Preprocessed, e.clone());
                pre_entries.push((id.clone(), e));
            }
            Some(Err(reason)) => {
                *report.preprocessed_skipped.entry(reason.clone()).or_default() += 1;
                skips.push(SkipEntry {
                    image_id: id.clone(),
                    variant: ImageVariant::Preprocessed,
                    reason,
                });
            }
            None => {}
        }
    }
    if config.use_cache {
        new_cache.save(&cache_path)?;
    }

    let read_file = |id: &ImageId| -> Result<Vec<u8>> {
        let r = manifest.get(id).expect("hashed images are in the manifest");
        let p = roots.resolve(r)?;
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let mut sets = Vec::new();
    if config.variants.original {
        let s = find_duplicate_sets(&original_entries, ImageVariant::Original, &config.hash, read_file)?;
        report.sets_original = s.len();
        sets.extend(s);
    }
    if config.variants.preprocessed {
        let read_crop = |id: &ImageId| -> Result<Vec<u8>> {
            let bytes = read_file(id)?;
            let buf = decode_canonical(id, &bytes)?;
            aligned_crop(&buf, &store, id)
                .map(PixelBuffer::into_data)
                .map_err(|reason| Error::Inconsistent(format!("{id}: alignment no longer succeeds ({reason})")))
        };
        let s = find_duplicate_sets(&pre_entries, ImageVariant::Preprocessed, &config.hash, read_crop)?;
        report.sets_preprocessed = s.len();
        sets.extend(s);
    }
    write_text(&config.path("dup_sets.tsv"), &write_sets(&sets))?;
    write_text(&config.path("skip_list.tsv"), &write_skip_list(&skips))?;
    write_text(
        &config.path("scan_report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    log::info!(
        "scanned {} images: {} original and {} preprocessed duplicate sets",
        report.images,
        report.sets_original,
        report.sets_preprocessed
    );
    Ok(report)
}

/// Scan outputs needed by the later stages.
struct ScanState {
    /// Decodable images only.
    manifest: Manifest,
    sets: Vec<RawDupSet>,
    digests: HashMap<ImageId, ContentDigest>,
}

fn load_scan(config: &RunConfig) -> Result<ScanState> {
    let manifest = Manifest::load(&config.path("manifest.tsv"))?;
    let sets_path = config.path("dup_sets.tsv");
    let sets = parse_sets(&read_text(&sets_path)?, &sets_path)?;
    let skips = parse_skip_list(&config.path("skip_list.tsv"))?;
    let undecodable: BTreeSet<&ImageId> = skips
        .iter()
        .filter(|s| s.variant == ImageVariant::Original)
        .map(|s| &s.image_id)
        .collect();
    let manifest = manifest.filtered(|r| !undecodable.contains(&r.image_id));
    let cache = HashCache::load(&config.path("hash_cache.tsv"))?;
    let digests = manifest
        .records()
        .iter()
        .filter_map(|r| cache.get(&r.image_id, ImageVariant::Original).map(|e| (r.image_id.clone(), e.digest)))
        .collect();
    Ok(ScanState {
        manifest,
        sets,
        digests,
    })
}

fn plan_for(state: &ScanState, store: &FeatureStore, config: &DedupConfig) -> Result<DedupPlan> {
    let digests = (!state.digests.is_empty()).then_some(&state.digests);
    build_plan(&state.manifest, &state.sets, store, digests, config)
}

/// Builds the deduplication plan from the scan outputs and writes `plan/`.
pub fn cmd_dedup(config: &RunConfig) -> Result<DedupPlan> {
    config.validate()?;
    let state = load_scan(config)?;
    let store = config.features()?;
    let plan = config.pool()?.install(|| plan_for(&state, &store, &config.dedup))?;
    plan.write(&config.path("plan"))?;
    log::info!(
        "plan: {} removed, {} moved, {} kept in sets",
        plan.report.removed,
        plan.report.moved,
        plan.report.kept
    );
    Ok(plan)
}

/// Applies `plan/actions.tsv`. Materializing copies the retained files to
/// `output_dir/materialized/<dataset>/`.
pub fn cmd_apply(config: &RunConfig, materialize: bool) -> Result<Manifest> {
    config.validate()?;
    let state = load_scan(config)?;
    let actions = DedupPlan::load_actions(&config.path("plan").join("actions.tsv"), &state.manifest)?;
    let mode = if materialize {
        ApplyMode::Materialize {
            out_root: config.path("materialized"),
        }
    } else {
        ApplyMode::ListOnly
    };
    let out = apply_plan(&actions, &state.manifest, &config.roots(), &mode)?;
    out.save(&config.path("deduplicated_manifest.tsv"))?;
    Ok(out)
}

/// Evaluates the original, fully deduplicated and preservatively deduplicated
/// variant of every dataset and writes `eval/`.
pub fn cmd_eval(config: &RunConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    if config.sidecars.is_empty() {
        return Err(Error::Config("evaluation needs at least one feature sidecar".into()));
    }
    let state = load_scan(config)?;
    let store = config.features()?;
    let rows = config.pool()?.install(|| -> Result<Vec<MetricsRow>> {
        let full = plan_for(
            &state,
            &store,
            &DedupConfig {
                mode: DedupMode::FullRemoval,
                ..config.dedup.clone()
            },
        )?;
        let preservative = plan_for(
            &state,
            &store,
            &DedupConfig {
                mode: DedupMode::Preservative,
                ..config.dedup.clone()
            },
        )?;
        let roots = config.roots();
        let full_manifest = apply_plan(&full.actions, &state.manifest, &roots, &ApplyMode::ListOnly)?;
        let pres_manifest = apply_plan(&preservative.actions, &state.manifest, &roots, &ApplyMode::ListOnly)?;
        let mut rows = Vec::new();
        for dataset in state.manifest.datasets() {
            for (variant, m) in [
                (EvalVariant::Original, &state.manifest),
                (EvalVariant::Full, &full_manifest),
                (EvalVariant::Preservative, &pres_manifest),
            ] {
                rows.push(evaluate(dataset, variant, &m.dataset(dataset), &store, config.eval.seed)?);
            }
        }
        Ok(rows)
    })?;
    let dir = config.path("eval");
    write_text(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
    write_text(
        &dir.join("metrics.json"),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    Ok(rows)
}

/// Human-readable summary of whatever outputs exist in the run directory.
pub fn cmd_report(config: &RunConfig) -> Result<String> {
    let mut out = String::new();
    let scan_path = config.path("scan_report.json");
    if scan_path.exists() {
        let scan: ScanReport = serde_json::from_str(&read_text(&scan_path)?)
            .map_err(|e| Error::Inconsistent(format!("{}: {e}", scan_path.display())))?;
        let _ = writeln!(out, "scan: {} images, {} files skipped, {} undecodable", scan.images, scan.skipped_files, scan.undecodable_images);
        let _ = writeln!(
            out,
            "      {} original / {} preprocessed duplicate sets, cache hits {} / {}",
            scan.sets_original, scan.sets_preprocessed, scan.cache_hits_original, scan.cache_hits_preprocessed
        );
        for (reason, n) in &scan.preprocessed_skipped {
            let _ = writeln!(out, "      preprocessed skip {reason}: {n}");
        }
    }
    let plan_path = config.path("plan").join("report.json");
    if plan_path.exists() {
        let r: DedupReport = serde_json::from_str(&read_text(&plan_path)?)
            .map_err(|e| Error::Inconsistent(format!("{}: {e}", plan_path.display())))?;
        let _ = writeln!(out, "dataset\timages\tsubjects\tintra\tinter\toverlap\tcombined\tsubjects_with_dups");
        for (d, c) in r.per_dataset.iter().chain([(&"total".to_owned(), &r.totals)]) {
            let _ = writeln!(
                out,
                "{d}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.images, c.subjects, c.intra_images, c.inter_images, c.overlap_images, c.combined_images, c.combined_subjects
            );
        }
        let _ = writeln!(
            out,
            "plan: {} removed, {} moved, {} kept ({} merged sets, {} ejected as false positives)",
            r.removed, r.moved, r.kept, r.merged_sets, r.fp_ejected_images
        );
        for w in &r.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
    }
    let metrics_path = config.path("eval").join("metrics.csv");
    if metrics_path.exists() {
        out.push_str(&read_text(&metrics_path)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no outputs found in {}", config.output_dir.display())));
    }
    Ok(out)
}

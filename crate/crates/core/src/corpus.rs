//! Dataset ingestion: manifests of labeled images and canonical pixel decoding.
//!
//! Subjects are identified by the immediate parent directory of each image file,
//! so `root/alice/001.jpg` belongs to subject `alice`. Manifests are always kept in
//! ascending `(dataset_id, rel_path)` order, which makes every downstream stage
//! independent of filesystem enumeration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// File extensions accepted by the ingester (compared case-insensitively).
pub const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "bmp"];

/// Stable image identifier, `dataset_id/rel_path`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(dataset_id: &str, rel_path: &str) -> Self {
        ImageId(format!("{dataset_id}/{rel_path}"))
    }

    /// Wraps an already formatted identifier, e.g. one read back from a sidecar.
    pub fn from_raw(raw: impl Into<String>) -> Self {
        ImageId(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A subject is only unique within its dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectKey {
    pub dataset_id: String,
    pub subject_id: String,
}

impl SubjectKey {
    pub fn new(dataset_id: impl Into<String>, subject_id: impl Into<String>) -> Self {
        SubjectKey {
            dataset_id: dataset_id.into(),
            subject_id: subject_id.into(),
        }
    }
}

impl fmt::Display for SubjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset_id, self.subject_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub dataset_id: String,
    pub subject_id: String,
    pub rel_path: String,
    pub byte_len: u64,
}

impl ImageRecord {
    pub fn new(dataset_id: &str, subject_id: &str, rel_path: &str, byte_len: u64) -> Self {
        ImageRecord {
            image_id: ImageId::new(dataset_id, rel_path),
            dataset_id: dataset_id.to_owned(),
            subject_id: subject_id.to_owned(),
            rel_path: rel_path.to_owned(),
            byte_len,
        }
    }

    pub fn subject(&self) -> SubjectKey {
        SubjectKey::new(&self.dataset_id, &self.subject_id)
    }

    fn sort_key(&self) -> (&str, &str) {
        (&self.dataset_id, &self.rel_path)
    }
}

/// A file the ingester saw but did not turn into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub dataset_id: String,
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    datasets: Vec<String>,
    index: BTreeMap<ImageId, usize>,
}

impl Manifest {
    /// Builds a manifest from arbitrary records, sorting them and checking the
    /// uniqueness invariants.
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut index = BTreeMap::new();
        let mut datasets = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.subject_id.is_empty() {
                return Err(Error::InvalidInput(format!("empty subject for {}", r.image_id)));
            }
            if i > 0 && records[i - 1].sort_key() == r.sort_key() {
                return Err(Error::InvalidInput(format!("duplicate path {}", r.image_id)));
            }
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate image id {}", r.image_id)));
            }
            datasets.insert(r.dataset_id.clone());
        }
        Ok(Manifest {
            records,
            datasets: datasets.into_iter().collect(),
            index,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.index.contains_key(id)
    }

    /// Position of an image in manifest order.
    pub fn position(&self, id: &ImageId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn subject_count(&self) -> usize {
        self.by_subject().len()
    }

    /// Images grouped per subject; every group is in ascending path order.
    pub fn by_subject(&self) -> BTreeMap<SubjectKey, Vec<&ImageRecord>> {
        let mut out: BTreeMap<SubjectKey, Vec<&ImageRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.subject()).or_default().push(r);
        }
        out
    }

    /// Restricts the manifest to one dataset.
    pub fn dataset(&self, dataset_id: &str) -> Manifest {
        let records = self
            .records
            .iter()
            .filter(|r| r.dataset_id == dataset_id)
            .cloned()
            .collect();
        Manifest::from_records(records).expect("subset of a valid manifest")
    }

    /// Keeps only records for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Manifest {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Manifest::from_records(records).expect("subset of a valid manifest")
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                r.dataset_id, r.subject_id, r.rel_path, r.byte_len
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                reason: reason.to_owned(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err("expected 4 tab-separated fields"));
            }
            let byte_len = fields[3]
                .parse::<u64>()
                .map_err(|_| parse_err("byte_len is not a non-negative integer"))?;
            records.push(ImageRecord::new(fields[0], fields[1], fields[2], byte_len));
        }
        Manifest::from_records(records)
    }
}

/// Root directory of every dataset, used to resolve `rel_path` on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRoots(BTreeMap<String, PathBuf>);

impl DatasetRoots {
    pub fn new(roots: impl IntoIterator<Item = (String, PathBuf)>) -> Self {
        DatasetRoots(roots.into_iter().collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PathBuf)> {
        self.0.iter()
    }

    pub fn root(&self, dataset_id: &str) -> Option<&Path> {
        self.0.get(dataset_id).map(PathBuf::as_path)
    }

    pub fn resolve(&self, record: &ImageRecord) -> Result<PathBuf> {
        self.root(&record.dataset_id)
            .map(|root| root.join(&record.rel_path))
            .ok_or_else(|| Error::Config(format!("no root configured for dataset {}", record.dataset_id)))
    }
}

/// How subject labels are derived from the directory tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// The immediate parent directory of a file is its subject label.
    #[default]
    SubjectPerDirectory,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOutcome {
    pub manifest: Manifest,
    pub skipped: Vec<SkippedFile>,
}

/// Walks every dataset root and collects image records.
///
/// `exclude` lists image ids that must not be ingested (externally curated
/// exclusion lists, such as non-face images).
pub fn build_manifest(
    roots: &DatasetRoots,
    layout: Layout,
    exclude: &BTreeSet<ImageId>,
) -> Result<ManifestOutcome> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (dataset_id, root) in roots.iter() {
        let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
        if !meta.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotADirectory, "dataset root is not a directory"),
            ));
        }
        std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;

        for entry in WalkDir::new(root).follow_links(true) {
            let mut skip = |path: String, reason: &str| {
                skipped.push(SkippedFile {
                    dataset_id: dataset_id.clone(),
                    path,
                    reason: reason.to_owned(),
                })
            };
            let entry = match entry {
                Ok(e) => e,
                Err(e) => {
                    let path = e
                        .path()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default();
                    skip(path, "unreadable");
                    continue;
                }
            };
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).expect("walk stays below root");
            let Some(rel_path) = rel_path_string(rel) else {
                skip(rel.display().to_string(), "non-utf8-path");
                continue;
            };
            if !has_image_extension(rel) {
                skip(rel_path, "unrecognized-extension");
                continue;
            }
            if rel_path.contains(['\t', '\n', '\r']) {
                skip(rel_path, "control-character-in-path");
                continue;
            }
            let subject = match layout {
                Layout::SubjectPerDirectory => rel
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|s| s.to_str())
                    .map(str::to_owned),
            };
            let Some(subject) = subject.filter(|s| !s.is_empty()) else {
                skip(rel_path, "no-subject-directory");
                continue;
            };
            let image_id = ImageId::new(dataset_id, &rel_path);
            if exclude.contains(&image_id) {
                skip(rel_path, "excluded");
                continue;
            }
            let byte_len = match entry.metadata() {
                Ok(m) => m.len(),
                Err(_) => {
                    skip(rel_path, "unreadable");
                    continue;
                }
            };
            records.push(ImageRecord::new(dataset_id, &subject, &rel_path, byte_len));
        }
    }
    skipped.sort_by(|a, b| (&a.dataset_id, &a.path).cmp(&(&b.dataset_id, &b.path)));
    Ok(ManifestOutcome {
        manifest: Manifest::from_records(records)?,
        skipped,
    })
}

fn rel_path_string(rel: &Path) -> Option<String> {
    let parts: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
    parts.map(|p| p.join("/"))
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|ok| e.eq_ignore_ascii_case(ok)))
        .unwrap_or(false)
}

/// Row-major 8-bit pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl PixelBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "pixel data has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(PixelBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn_rgb(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        PixelBuffer {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn from_fn_gray(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        PixelBuffer {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_degenerate(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    /// Copies the rectangle `[x0, x1) × [y0, y1)`, clamped to the buffer.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> PixelBuffer {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        let c = self.channels as usize;
        let mut data = Vec::with_capacity((x1 - x0) as usize * (y1 - y0) as usize * c);
        for y in y0..y1 {
            let start = (y as usize * self.width as usize + x0 as usize) * c;
            let end = (y as usize * self.width as usize + x1 as usize) * c;
            data.extend_from_slice(&self.data[start..end]);
        }
        PixelBuffer {
            width: x1 - x0,
            height: y1 - y0,
            channels: self.channels,
            data,
        }
    }

    /// Encodes as PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.data, self.width, self.height, color)
            .map_err(|e| Error::InvalidInput(format!("png encoding failed: {e}")))?;
        Ok(out)
    }
}

/// Decodes an encoded image file into 8-bit RGB.
pub fn decode_canonical(id: &ImageId, bytes: &[u8]) -> Result<PixelBuffer> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        id: id.clone(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (width, height) = rgb.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::Decode {
            id: id.clone(),
            reason: "empty image".to_owned(),
        });
    }
    Ok(PixelBuffer {
        width,
        height,
        channels: 3,
        data: rgb.into_raw(),
    })
}

/// BT.601 luma with integer arithmetic, truncated: `(299 R + 587 G + 114 B) / 1000`.
pub fn to_grayscale(buf: &PixelBuffer) -> PixelBuffer {
    if buf.channels == 1 {
        return buf.clone();
    }
    let data = buf
        .data
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    PixelBuffer {
        width: buf.width,
        height: buf.height,
        channels: 1,
        data,
    }
}

#[inline]
pub(crate) fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32) / 1000) as u8
}

//! Per-image features read from sidecar files, and similarity scores.
//!
//! Sidecar layout (UTF-8, one record per line):
//!
//! ```text
//! #dim=<D>
//! image_id \t quality|nan \t v1,...,vD|- \t detections_json|-
//! ```
//!
//! A detections field of `[]` means the provider ran and found no face; `-`
//! means no detection data was supplied at all.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::align::Detection;
use crate::corpus::ImageId;
use crate::error::{Error, Result};

/// Tolerance on the stored norm; vectors outside it are renormalized on load.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes if the norm is off by more than [`NORM_TOLERANCE`]. The flag
    /// reports whether that happened.
    pub fn new(values: Vec<f64>) -> Result<(Self, bool)> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding must be non-empty and finite".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput("embedding has zero norm".into()));
        }
        if (norm - 1.0).abs() <= NORM_TOLERANCE {
            return Ok((Embedding(values), false));
        }
        Ok((Embedding(values.into_iter().map(|v| v / norm).collect()), true))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Quality score where a missing value ranks below every real score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quality(pub Option<f64>);

impl Quality {
    pub fn missing() -> Self {
        Quality(None)
    }

    pub fn value(self) -> Option<f64> {
        self.0
    }
}

impl Eq for Quality {}

impl PartialOrd for Quality {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Quality {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0, other.0) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(a), Some(b)) => a.total_cmp(&b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureRecord {
    pub embedding: Option<Embedding>,
    pub quality: Quality,
    /// `None` when the provider supplied no detection data.
    pub detections: Option<Vec<Detection>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    dim: Option<usize>,
    records: BTreeMap<ImageId, FeatureRecord>,
    warnings: Vec<String>,
}

static EMPTY: FeatureRecord = FeatureRecord {
    embedding: None,
    quality: Quality(None),
    detections: None,
};

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim: Some(dim),
            ..Default::default()
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.records.contains_key(id)
    }

    /// Total lookup: unknown images have no features.
    pub fn get(&self, id: &ImageId) -> &FeatureRecord {
        self.records.get(id).unwrap_or(&EMPTY)
    }

    pub fn embedding(&self, id: &ImageId) -> Option<&Embedding> {
        self.get(id).embedding.as_ref()
    }

    pub fn quality(&self, id: &ImageId) -> Quality {
        self.get(id).quality
    }

    /// Detection ran and found no usable face.
    pub fn is_landmark_failure(&self, id: &ImageId) -> bool {
        matches!(&self.get(id).detections, Some(d) if d.is_empty())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &FeatureRecord)> {
        self.records.iter()
    }

    pub fn insert(&mut self, id: ImageId, record: FeatureRecord) -> Result<()> {
        if let Some(e) = &record.embedding {
            match self.dim {
                Some(d) if d != e.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: e.dim(),
                    })
                }
                None => self.dim = Some(e.dim()),
                _ => {}
            }
        }
        if self.records.insert(id.clone(), record).is_some() {
            let msg = format!("duplicate feature record for {id}, keeping the last one");
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_owned(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        let dim = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("#dim=")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .ok_or_else(|| err(1, "expected header #dim=<D>".into()))?,
            None => return Err(err(1, "empty sidecar".into())),
        };
        let mut store = FeatureStore::new(dim);
        for (n, line) in lines {
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let quality = match fields[1] {
                "nan" | "NaN" => Quality(None),
                q => {
                    let v: f64 = q.parse().map_err(|_| err(lineno, format!("bad quality {q:?}")))?;
                    Quality((!v.is_nan()).then_some(v))
                }
            };
            let embedding = match fields[2] {
                "-" => None,
                v => {
                    let values = v
                        .split(',')
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err(lineno, "bad embedding value".into()))?;
                    if values.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            actual: values.len(),
                        });
                    }
                    let (e, renormalized) = Embedding::new(values).map_err(|e| err(lineno, e.to_string()))?;
                    if renormalized {
                        let msg = format!("{}:{lineno}: embedding was not unit length, normalized", path.display());
                        log::warn!("{msg}");
                        store.warnings.push(msg);
                    }
                    Some(e)
                }
            };
            let detections = match fields[3] {
                "-" => None,
                j => {
                    let d: Vec<Detection> =
                        serde_json::from_str(j).map_err(|e| err(lineno, format!("bad detections: {e}")))?;
                    for det in &d {
                        det.validate().map_err(|e| err(lineno, e.to_string()))?;
                    }
                    Some(d)
                }
            };
            store.insert(
                ImageId::from_raw(fields[0]),
                FeatureRecord {
                    embedding,
                    quality,
                    detections,
                },
            )?;
        }
        Ok(store)
    }

    /// Merges several sidecars; later files override earlier ones per image.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut merged = FeatureStore::default();
        for path in paths {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let part = FeatureStore::parse(&text, path)?;
            if let (Some(a), Some(b)) = (merged.dim, part.dim) {
                if a != b {
                    return Err(Error::DimensionMismatch { expected: a, actual: b });
                }
            }
            merged.dim = merged.dim.or(part.dim);
            merged.warnings.extend(part.warnings);
            for (id, rec) in part.records {
                merged.insert(id, rec)?;
            }
        }
        Ok(merged)
    }

    pub fn to_sidecar_text(&self) -> String {
        let mut out = format!("#dim={}\n", self.dim.unwrap_or(0));
        for (id, r) in &self.records {
            let quality = r.quality.0.map_or_else(|| "nan".to_owned(), |q| q.to_string());
            let emb = r.embedding.as_ref().map_or_else(
                || "-".to_owned(),
                |e| e.values().iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            );
            let det = r.detections.as_ref().map_or_else(
                || "-".to_owned(),
                |d| serde_json::to_string(d).expect("detections serialize"),
            );
            let _ = writeln!(out, "{id}\t{quality}\t{emb}\t{det}");
        }
        out
    }
}

/// Inner product of two unit vectors, summed in index order.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum())
}

/// Mean cosine similarity of `probe` against every gallery vector.
pub fn mean_similarity<'a>(probe: &Embedding, gallery: impl IntoIterator<Item = &'a Embedding>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in gallery {
        total += cosine_similarity(probe, g)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoCandidate);
    }
    Ok(total / n as f64)
}

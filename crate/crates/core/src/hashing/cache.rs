//! Resumable hash cache.
//!
//! ```text
//! #algo=<HASH_ALGORITHM_VERSION>
//! image_id \t variant \t digest_hex \t phash_hex \t multihash_hex_list
//! ```
//!
//! For the original variant the digest is the file digest and doubles as the
//! cache key: an entry is reused only while the file still has that digest. A
//! preprocessed entry carries the digest of the aligned crop pixels and is reused
//! only together with a valid original entry of the same image.

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::ImageId;
use crate::error::{Error, Result};
use crate::hashing::{HashEntry, ImageVariant, MultiHash, HASH_ALGORITHM_VERSION};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HashCache {
    entries: BTreeMap<(ImageId, ImageVariant), HashEntry>,
}

impl HashCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &ImageId, variant: ImageVariant) -> Option<&HashEntry> {
        self.entries.get(&(id.clone(), variant))
    }

    pub fn insert(&mut self, id: ImageId, variant: ImageVariant, entry: HashEntry) {
        self.entries.insert((id, variant), entry);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#algo={HASH_ALGORITHM_VERSION}\n");
        for ((id, variant), e) in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                id,
                variant,
                e.digest.to_hex(),
                e.phash.to_hex(),
                e.multihash.to_hex_list()
            ));
        }
        out
    }

    /// A missing file or a cache written by another algorithm version yields an
    /// empty cache; malformed lines are errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashCache::default()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == format!("#algo={HASH_ALGORITHM_VERSION}") => {}
            _ => {
                log::warn!("{}: stale or unversioned hash cache ignored", path.display());
                return Ok(HashCache::default());
            }
        }
        let mut cache = HashCache::default();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                reason,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err("expected 5 tab-separated fields".into()));
            }
            let entry = HashEntry {
                digest: f[2].parse().map_err(|e: Error| err(e.to_string()))?,
                phash: f[3].parse().map_err(|e: Error| err(e.to_string()))?,
                multihash: MultiHash::parse_hex_list(f[4]).map_err(|e| err(e.to_string()))?,
            };
            let variant = f[1].parse().map_err(|e: Error| err(e.to_string()))?;
            cache.insert(ImageId::from_raw(f[0]), variant, entry);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

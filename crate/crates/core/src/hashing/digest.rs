//! Exact duplicates: content digests bucket candidate files, byte comparison
//! confirms them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::ImageId;
use crate::error::{Error, Result};

/// Name of the digest algorithm, echoed into run reports.
pub const DIGEST_ALGORITHM: &str = "BLAKE3-256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ContentDigest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::InvalidInput(format!("invalid digest {s:?}: {e}")))?;
        Ok(ContentDigest(out))
    }
}

pub fn content_digest(bytes: &[u8]) -> ContentDigest {
    ContentDigest(*blake3::hash(bytes).as_bytes())
}

/// Splits a digest bucket into byte-identical subgroups of size ≥ 2, each in
/// ascending id order. `read` supplies the bytes of a member.
pub fn verify_exact_group<F>(group: &[ImageId], mut read: F) -> Result<Vec<Vec<ImageId>>>
where
    F: FnMut(&ImageId) -> Result<Vec<u8>>,
{
    let mut ids = group.to_vec();
    ids.sort();
    ids.dedup();
    let mut classes: Vec<(Vec<u8>, Vec<ImageId>)> = Vec::new();
    for id in ids {
        let bytes = read(&id)?;
        match classes.iter_mut().find(|(b, _)| *b == bytes) {
            Some((_, members)) => members.push(id),
            None => classes.push((bytes, vec![id])),
        }
    }
    Ok(classes
        .into_iter()
        .map(|(_, m)| m)
        .filter(|m| m.len() >= 2)
        .collect())
}

/// Groups items by digest and verifies every multi-member bucket byte for byte.
/// Returns the confirmed groups and the number of colliding buckets that the
/// byte check rejected (fully or partly).
pub fn find_exact_groups<F>(items: &[(ImageId, ContentDigest)], mut read: F) -> Result<(Vec<Vec<ImageId>>, usize)>
where
    F: FnMut(&ImageId) -> Result<Vec<u8>>,
{
    let mut buckets: BTreeMap<ContentDigest, Vec<ImageId>> = BTreeMap::new();
    for (id, d) in items {
        buckets.entry(*d).or_default().push(id.clone());
    }
    let mut groups = Vec::new();
    let mut rejected = 0;
    for (_, members) in buckets.into_iter().filter(|(_, m)| m.len() >= 2) {
        let verified = verify_exact_group(&members, &mut read)?;
        let covered: usize = verified.iter().map(Vec::len).sum();
        if covered != members.len() {
            rejected += 1;
        }
        groups.extend(verified);
    }
    groups.sort();
    Ok((groups, rejected))
}

//! Preservative deduplication: merging raw duplicate sets, rejecting false
//! positives by face similarity, keeping one representative per set and
//! assigning inter-subject representatives to the best-fitting subject.

mod apply;
mod plan;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageId, Manifest, SubjectKey};
use crate::error::{Error, Result};
use crate::features::{cosine_similarity, mean_similarity, Embedding, FeatureStore};
use crate::hashing::{DupSource, ImageVariant, RawDupSet};
use crate::unionfind::UnionFind;

pub use apply::{apply_plan, materialized_roots, ApplyMode};
pub use plan::{
    build_plan, table1_counts, DedupAction, DedupConfig, DedupMode, DedupPlan, DedupReport, Table1Counts, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exactness {
    /// All members are byte-identical files.
    Exact,
    /// No byte-identical files.
    Near,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedDupSet {
    /// In manifest order.
    pub members: Vec<ImageId>,
    pub subjects: BTreeSet<SubjectKey>,
    pub kind: SetKind,
    pub exactness: Exactness,
    /// Byte-identical subgroups (size ≥ 2), each in manifest order.
    pub exact_groups: Vec<Vec<ImageId>>,
}

impl MergedDupSet {
    fn build(mut members: Vec<ImageId>, mut exact_groups: Vec<Vec<ImageId>>, manifest: &Manifest) -> Self {
        let pos = |id: &ImageId| manifest.position(id).expect("members are validated against the manifest");
        members.sort_by_key(|id| pos(id));
        members.dedup();
        for g in &mut exact_groups {
            g.sort_by_key(|id| pos(id));
        }
        exact_groups.retain(|g| g.len() >= 2);
        exact_groups.sort_by_key(|g| pos(&g[0]));
        let subjects: BTreeSet<SubjectKey> = members
            .iter()
            .map(|id| manifest.get(id).expect("validated").subject())
            .collect();
        let kind = if subjects.len() == 1 { SetKind::Intra } else { SetKind::Inter };
        let exactness = match exact_groups.as_slice() {
            [] => Exactness::Near,
            [g] if g.len() == members.len() => Exactness::Exact,
            _ => Exactness::Mixed,
        };
        MergedDupSet {
            members,
            subjects,
            kind,
            exactness,
            exact_groups,
        }
    }
}

fn check_members(sets: &[RawDupSet], manifest: &Manifest) -> Result<()> {
    let missing: Vec<String> = sets
        .iter()
        .flat_map(|s| &s.members)
        .filter(|id| !manifest.contains(id))
        .map(|id| id.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Inconsistent(format!(
            "{} duplicate set member(s) not in the manifest: {}",
            missing.len(),
            missing.join(", ")
        )))
    }
}

/// Unions overlapping sets from every detector and image variant into disjoint
/// sets. Byte-identity is tracked separately from exact-source sets on original
/// images. Sets come out ordered by their first member in manifest order.
pub fn merge_overlapping_sets(sets: &[RawDupSet], manifest: &Manifest) -> Result<Vec<MergedDupSet>> {
    check_members(sets, manifest)?;
    let n = manifest.len();
    let mut all = UnionFind::new(n);
    let mut exact = UnionFind::new(n);
    let mut involved = BTreeSet::new();
    for s in sets {
        let idx: Vec<usize> = s.members.iter().map(|m| manifest.position(m).expect("checked")).collect();
        involved.extend(idx.iter().copied());
        let byte_identical = s.source == DupSource::Exact && s.variant == ImageVariant::Original;
        for w in idx.windows(2) {
            all.union(w[0], w[1]);
            if byte_identical {
                exact.union(w[0], w[1]);
            }
        }
    }
    let records = manifest.records();
    let mut exact_by_root: BTreeMap<usize, Vec<ImageId>> = BTreeMap::new();
    for &i in &involved {
        exact_by_root.entry(exact.find(i)).or_default().push(records[i].image_id.clone());
    }
    let mut groups: BTreeMap<usize, (Vec<ImageId>, Vec<Vec<ImageId>>)> = BTreeMap::new();
    for (_, eg) in exact_by_root {
        let root = all.find(manifest.position(&eg[0]).expect("checked"));
        let entry = groups.entry(root).or_default();
        entry.0.extend(eg.iter().cloned());
        entry.1.push(eg);
    }
    let mut out: Vec<MergedDupSet> = groups
        .into_values()
        .filter(|(m, _)| m.len() >= 2)
        .map(|(m, eg)| MergedDupSet::build(m, eg, manifest))
        .collect();
    out.sort_by_key(|s| manifest.position(&s.members[0]));
    Ok(out)
}

/// Which images of a near-duplicate set survive the similarity check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpRule {
    /// While any within-set pair scores below the threshold, the image with
    /// the most such pairs leaves the set (ties: lowest similarity, then the
    /// later image). A lone pair below the threshold therefore dissolves.
    #[default]
    WorstFirst,
    /// The set splits into connected components of the graph whose edges are
    /// pairs at or above the threshold.
    Components,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FpOutcome {
    pub sets: Vec<MergedDupSet>,
    /// Images returned to the dataset unchanged.
    pub ejected: Vec<ImageId>,
    /// Byte-identical groups that were separated from the rest of their set;
    /// they continue as their own exact sets.
    pub split_exact_groups: usize,
}

/// Applies the false-positive correction to one merged set. Byte-identical
/// subgroups act as single nodes and are never returned to the dataset; images
/// without an embedding cannot be scored and stay in the set.
pub fn false_positive_filter(
    set: &MergedDupSet,
    store: &FeatureStore,
    manifest: &Manifest,
    threshold: f64,
    rule: FpRule,
) -> FpOutcome {
    // Nodes: each exact group, then every remaining member on its own.
    let mut nodes: Vec<Vec<ImageId>> = set.exact_groups.clone();
    let grouped: HashSet<&ImageId> = set.exact_groups.iter().flatten().collect();
    nodes.extend(set.members.iter().filter(|m| !grouped.contains(m)).map(|m| vec![m.clone()]));
    let embeddings: Vec<Option<&Embedding>> = nodes
        .iter()
        .map(|g| g.iter().find_map(|id| store.embedding(id)))
        .collect();

    let k = nodes.len();
    let mut sim = vec![vec![None; k]; k];
    let mut uf = UnionFind::new(k);
    for i in 0..k {
        for j in i + 1..k {
            if let (Some(a), Some(b)) = (embeddings[i], embeddings[j]) {
                let s = cosine_similarity(a, b).expect("store has a single dimension");
                sim[i][j] = Some(s);
                sim[j][i] = Some(s);
            }
            if sim[i][j].is_none_or(|s| s >= threshold) {
                uf.union(i, j);
            }
        }
    }

    let components: Vec<Vec<usize>> = match rule {
        FpRule::WorstFirst => {
            let mut active = vec![true; k];
            loop {
                // (below-threshold pair count, lowest incident similarity, node)
                let mut worst: Option<(usize, f64, usize)> = None;
                for i in (0..k).filter(|&i| active[i]) {
                    let low: Vec<f64> = (0..k)
                        .filter(|&j| j != i && active[j])
                        .filter_map(|j| sim[i][j])
                        .filter(|&s| s < threshold)
                        .collect();
                    if low.is_empty() {
                        continue;
                    }
                    let min = low.iter().copied().fold(f64::INFINITY, f64::min);
                    let better = worst.is_none_or(|(c, m, _)| low.len() > c || (low.len() == c && min <= m));
                    if better {
                        worst = Some((low.len(), min, i));
                    }
                }
                match worst {
                    Some((_, _, i)) => active[i] = false,
                    None => break,
                }
            }
            let mut parts = vec![(0..k).filter(|&i| active[i]).collect::<Vec<_>>()];
            parts.extend((0..k).filter(|&i| !active[i]).map(|i| vec![i]));
            parts
        }
        FpRule::Components => uf.groups(1),
    };

    let mut out = FpOutcome::default();
    for comp in components {
        let members: Vec<ImageId> = comp.iter().flat_map(|&i| nodes[i].iter().cloned()).collect();
        match members.len() {
            0 => {}
            1 => out.ejected.extend(members),
            _ => {
                if comp.len() == 1 && k > 1 {
                    out.split_exact_groups += 1;
                }
                let eg = comp.iter().filter(|&&i| nodes[i].len() >= 2).map(|&i| nodes[i].clone()).collect();
                out.sets.push(MergedDupSet::build(members, eg, manifest));
            }
        }
    }
    let pos = |id: &ImageId| manifest.position(id);
    out.sets.sort_by_key(|s| pos(&s.members[0]));
    out.ejected.sort_by_key(|id| pos(id));
    out
}

/// The member kept for a set: the first path for byte-identical intra-subject
/// sets, otherwise the highest quality (missing quality ranks lowest) with the
/// first path breaking ties.
pub fn select_representative<'a>(set: &'a MergedDupSet, store: &FeatureStore) -> &'a ImageId {
    if set.exactness == Exactness::Exact && set.kind == SetKind::Intra {
        return &set.members[0];
    }
    let mut best = &set.members[0];
    let mut best_q = store.quality(best);
    for m in &set.members[1..] {
        let q = store.quality(m);
        if q > best_q {
            best = m;
            best_q = q;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterOutcome {
    Keep,
    Move,
    NoCandidate,
    BelowThreshold,
    Margin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterResolution {
    pub outcome: InterOutcome,
    pub target: Option<SubjectKey>,
    /// Mean similarity per usable candidate subject, in subject order.
    pub candidates: Vec<(SubjectKey, f64)>,
}

/// Decides where the representative of an inter-subject set goes.
///
/// Each subject of the set is scored by the mean similarity between the
/// representative and that subject's images that never appeared in any
/// duplicate set (`duplicate_members`). Subjects without such images having
/// embeddings are not candidates.
#[allow(clippy::too_many_arguments)]
pub fn resolve_inter_subject(
    set: &MergedDupSet,
    representative: &ImageId,
    manifest: &Manifest,
    store: &FeatureStore,
    duplicate_members: &HashSet<ImageId>,
    t_sim: f64,
    t_margin: f64,
) -> InterResolution {
    let no_candidate = |candidates| InterResolution {
        outcome: InterOutcome::NoCandidate,
        target: None,
        candidates,
    };
    let Some(probe) = store.embedding(representative) else {
        return no_candidate(Vec::new());
    };
    let by_subject = manifest.by_subject();
    let mut candidates = Vec::new();
    for subject in &set.subjects {
        let gallery: Vec<&Embedding> = by_subject
            .get(subject)
            .into_iter()
            .flatten()
            .filter(|r| !duplicate_members.contains(&r.image_id))
            .filter_map(|r| store.embedding(&r.image_id))
            .collect();
        if let Ok(mean) = mean_similarity(probe, gallery) {
            candidates.push((subject.clone(), mean));
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, m)) in candidates.iter().enumerate() {
        if best.is_none_or(|(_, b)| *m > b) {
            best = Some((i, *m));
        }
    }
    let Some((best_idx, best_mean)) = best else {
        return no_candidate(candidates);
    };
    let second = candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best_idx)
        .map(|(_, (_, m))| *m)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));

    let outcome = if best_mean < t_sim {
        InterOutcome::BelowThreshold
    } else if second.is_some_and(|s| (best_mean - s).abs() < t_margin) {
        InterOutcome::Margin
    } else {
        let current = manifest.get(representative).expect("validated").subject();
        if candidates[best_idx].0 == current {
            InterOutcome::Keep
        } else {
            InterOutcome::Move
        }
    };
    let target = matches!(outcome, InterOutcome::Keep | InterOutcome::Move).then(|| candidates[best_idx].0.clone());
    InterResolution {
        outcome,
        target,
        candidates,
    }
}

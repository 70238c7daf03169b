use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    false_positive_filter, merge_overlapping_sets, resolve_inter_subject, select_representative, Exactness,
    FpRule, InterOutcome, MergedDupSet, SetKind,
};
use crate::corpus::{ImageId, Manifest, SubjectKey};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::hashing::{ContentDigest, RawDupSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupMode {
    /// Keep one representative per set.
    #[default]
    Preservative,
    /// Remove every member of every set.
    FullRemoval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub mode: DedupMode,
    /// Minimum within-set similarity for near duplicates.
    pub t_fp: f64,
    /// Minimum mean similarity for assigning an inter-subject representative.
    pub t_assign: f64,
    /// Minimum gap between the best and second-best candidate subject.
    pub t_margin: f64,
    pub fp_rule: FpRule,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            mode: DedupMode::Preservative,
            t_fp: 0.40,
            t_assign: 0.40,
            t_margin: 0.20,
            fp_rule: FpRule::WorstFirst,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_fp", self.t_fp), ("t_assign", self.t_assign)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [-1, 1], got {v}")));
            }
        }
        if !(0.0..=2.0).contains(&self.t_margin) {
            return Err(Error::Config(format!("t_margin must lie in [0, 2], got {}", self.t_margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Remove,
    Move,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Keep => "keep",
            Verdict::Remove => "remove",
            Verdict::Move => "move",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupAction {
    pub image_id: ImageId,
    pub dataset_id: String,
    pub rel_path: String,
    pub subject_id: String,
    pub verdict: Verdict,
    /// New subject label of a moved image.
    pub target_subject: Option<String>,
    pub reason: String,
}

/// Duplicate statistics of one dataset (or of all datasets together),
/// computed on raw sets before merging.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table1Counts {
    pub images: usize,
    pub subjects: usize,
    pub intra_images: usize,
    pub intra_subjects: usize,
    pub inter_images: usize,
    pub inter_subjects: usize,
    /// Images that occur in both an intra- and an inter-subject set.
    pub overlap_images: usize,
    pub combined_images: usize,
    pub combined_subjects: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub config: DedupConfig,
    pub totals: Table1Counts,
    pub per_dataset: BTreeMap<String, Table1Counts>,
    /// Raw sets that spanned datasets; only their within-dataset parts are acted on.
    pub cross_dataset_sets: usize,
    pub merged_sets: usize,
    pub merged_members: usize,
    pub exact_intra_sets: usize,
    pub dissolved_sets: usize,
    pub fp_ejected_images: usize,
    pub split_exact_groups: usize,
    pub surviving_sets: usize,
    pub inter_sets: usize,
    pub inter_kept: usize,
    pub inter_moved: usize,
    pub inter_no_candidate: usize,
    pub inter_below_threshold: usize,
    pub inter_margin: usize,
    pub move_collisions: usize,
    pub removed: usize,
    pub moved: usize,
    pub kept: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupPlan {
    /// One entry per image of a merged set, in manifest order. Images without
    /// an entry are kept unchanged.
    pub actions: Vec<DedupAction>,
    pub report: DedupReport,
}

impl DedupPlan {
    pub fn removed(&self) -> impl Iterator<Item = &DedupAction> {
        self.actions.iter().filter(|a| a.verdict == Verdict::Remove)
    }

    pub fn moved(&self) -> impl Iterator<Item = &DedupAction> {
        self.actions.iter().filter(|a| a.verdict == Verdict::Move)
    }

    /// `dataset_id \t rel_path`
    pub fn removed_text(&self) -> String {
        let mut out = String::new();
        for a in self.removed() {
            let _ = writeln!(out, "{}\t{}", a.dataset_id, a.rel_path);
        }
        out
    }

    /// `dataset_id \t rel_path \t old_subject \t new_subject`
    pub fn moved_text(&self) -> String {
        let mut out = String::new();
        for a in self.moved() {
            let target = a.target_subject.as_deref().unwrap_or_default();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", a.dataset_id, a.rel_path, a.subject_id, target);
        }
        out
    }

    /// `dataset_id \t rel_path \t verdict \t target_or_dash \t reason`
    pub fn actions_text(&self) -> String {
        let mut out = String::new();
        for a in &self.actions {
            let target = a.target_subject.as_deref().unwrap_or("-");
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                a.dataset_id,
                a.rel_path,
                a.verdict.as_str(),
                target,
                a.reason
            );
        }
        out
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n"
    }

    /// Writes `removed.txt`, `moved.txt`, `actions.tsv` and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("removed.txt", self.removed_text()),
            ("moved.txt", self.moved_text()),
            ("actions.tsv", self.actions_text()),
            ("report.json", self.report_json()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads back an action list written by [`DedupPlan::write`].
    pub fn load_actions(path: &Path, manifest: &Manifest) -> Result<Vec<DedupAction>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut actions = Vec::new();
        for (n, line) in text.lines().enumerate() {
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
            let id = ImageId::new(f[0], f[1]);
            let record = manifest
                .get(&id)
                .ok_or_else(|| Error::Inconsistent(format!("plan refers to {id}, which is not in the manifest")))?;
            let verdict = match f[2] {
                "keep" => Verdict::Keep,
                "remove" => Verdict::Remove,
                "move" => Verdict::Move,
                v => return Err(err(format!("unknown verdict {v:?}"))),
            };
            let target_subject = (f[3] != "-").then(|| f[3].to_owned());
            if (verdict == Verdict::Move) != target_subject.is_some() {
                return Err(err("a target subject is required exactly for moves".into()));
            }
            actions.push(DedupAction {
                image_id: id,
                dataset_id: record.dataset_id.clone(),
                rel_path: record.rel_path.clone(),
                subject_id: record.subject_id.clone(),
                verdict,
                target_subject,
                reason: f[4].to_owned(),
            });
        }
        Ok(actions)
    }
}

fn set_kind(set: &RawDupSet, manifest: &Manifest) -> SetKind {
    let subjects: BTreeSet<SubjectKey> = set
        .members
        .iter()
        .map(|m| manifest.get(m).expect("validated").subject())
        .collect();
    if subjects.len() == 1 {
        SetKind::Intra
    } else {
        SetKind::Inter
    }
}

/// Restricts every raw set to its within-dataset parts.
fn split_by_dataset(sets: &[RawDupSet], manifest: &Manifest) -> (Vec<RawDupSet>, usize) {
    let mut out = Vec::new();
    let mut spanning = 0;
    for s in sets {
        let mut parts: BTreeMap<&str, Vec<ImageId>> = BTreeMap::new();
        for m in &s.members {
            parts.entry(&manifest.get(m).expect("validated").dataset_id).or_default().push(m.clone());
        }
        if parts.len() > 1 {
            spanning += 1;
        }
        out.extend(
            parts
                .into_values()
                .filter(|p| p.len() >= 2)
                .map(|p| RawDupSet::new(s.source, s.variant, p)),
        );
    }
    (out, spanning)
}

/// Table-1 style counts over raw sets, per dataset and in total.
pub fn table1_counts(sets: &[RawDupSet], manifest: &Manifest) -> (Table1Counts, BTreeMap<String, Table1Counts>) {
    let mut intra: HashSet<&ImageId> = HashSet::new();
    let mut inter: HashSet<&ImageId> = HashSet::new();
    for s in sets {
        let target = match set_kind(s, manifest) {
            SetKind::Intra => &mut intra,
            SetKind::Inter => &mut inter,
        };
        target.extend(s.members.iter());
    }
    let count = |records: &mut dyn Iterator<Item = &crate::corpus::ImageRecord>| {
        let mut c = Table1Counts::default();
        let mut subjects = BTreeSet::new();
        let (mut si, mut se, mut sc) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for r in records {
            c.images += 1;
            let subject = r.subject();
            subjects.insert(subject.clone());
            let a = intra.contains(&r.image_id);
            let b = inter.contains(&r.image_id);
            if a {
                c.intra_images += 1;
                si.insert(subject.clone());
            }
            if b {
                c.inter_images += 1;
                se.insert(subject.clone());
            }
            if a && b {
                c.overlap_images += 1;
            }
            if a || b {
                c.combined_images += 1;
                sc.insert(subject);
            }
        }
        c.subjects = subjects.len();
        c.intra_subjects = si.len();
        c.inter_subjects = se.len();
        c.combined_subjects = sc.len();
        c
    };
    let totals = count(&mut manifest.records().iter());
    let per_dataset = manifest
        .datasets()
        .iter()
        .map(|d| (d.clone(), count(&mut manifest.records().iter().filter(|r| &r.dataset_id == d))))
        .collect();
    (totals, per_dataset)
}

struct Decision {
    verdict: Verdict,
    target: Option<String>,
    reason: &'static str,
}

impl Decision {
    fn new(verdict: Verdict, reason: &'static str) -> Self {
        Decision {
            verdict,
            target: None,
            reason,
        }
    }
}

/// Builds the deduplication plan for a manifest and its raw duplicate sets.
///
/// `digests` holds file content digests; when present, a representative is
/// not moved into a subject that already keeps a byte-identical file.
pub fn build_plan(
    manifest: &Manifest,
    raw_sets: &[RawDupSet],
    store: &FeatureStore,
    digests: Option<&HashMap<ImageId, ContentDigest>>,
    config: &DedupConfig,
) -> Result<DedupPlan> {
    config.validate()?;
    super::check_members(raw_sets, manifest)?;
    let (sets, cross_dataset_sets) = split_by_dataset(raw_sets, manifest);
    let (totals, per_dataset) = table1_counts(&sets, manifest);
    let merged = merge_overlapping_sets(&sets, manifest)?;
    let duplicate_members: HashSet<ImageId> = sets.iter().flat_map(|s| s.members.iter().cloned()).collect();

    let mut report = DedupReport {
        config: config.clone(),
        totals,
        per_dataset,
        cross_dataset_sets,
        merged_sets: merged.len(),
        merged_members: merged.iter().map(|s| s.members.len()).sum(),
        ..Default::default()
    };
    if store.is_empty() && config.mode == DedupMode::Preservative && !merged.is_empty() {
        report
            .warnings
            .push("no face features available; near-duplicate sets are not checked and inter-subject representatives are removed".into());
    }
    let mut decisions: BTreeMap<usize, Decision> = BTreeMap::new();
    let pos = |id: &ImageId| manifest.position(id).expect("validated");

    for set in &merged {
        if config.mode == DedupMode::FullRemoval {
            for m in &set.members {
                decisions.insert(pos(m), Decision::new(Verdict::Remove, "full-removal"));
            }
            continue;
        }
        let survivors: Vec<MergedDupSet> = if set.exactness == Exactness::Exact && set.kind == SetKind::Intra {
            report.exact_intra_sets += 1;
            vec![set.clone()]
        } else {
            let out = false_positive_filter(set, store, manifest, config.t_fp, config.fp_rule);
            report.fp_ejected_images += out.ejected.len();
            report.split_exact_groups += out.split_exact_groups;
            if out.sets.is_empty() {
                report.dissolved_sets += 1;
            }
            for m in &out.ejected {
                decisions.insert(pos(m), Decision::new(Verdict::Keep, "false-positive"));
            }
            out.sets
        };
        for s in &survivors {
            report.surviving_sets += 1;
            let rep = select_representative(s, store);
            for m in s.members.iter().filter(|m| *m != rep) {
                decisions.insert(pos(m), Decision::new(Verdict::Remove, "duplicate"));
            }
            let decision = match s.kind {
                SetKind::Intra => Decision::new(Verdict::Keep, "representative"),
                SetKind::Inter => {
                    report.inter_sets += 1;
                    let r = resolve_inter_subject(
                        s,
                        rep,
                        manifest,
                        store,
                        &duplicate_members,
                        config.t_assign,
                        config.t_margin,
                    );
                    match r.outcome {
                        InterOutcome::Keep => {
                            report.inter_kept += 1;
                            Decision::new(Verdict::Keep, "inter-keep")
                        }
                        InterOutcome::Move => {
                            report.inter_moved += 1;
                            Decision {
                                verdict: Verdict::Move,
                                target: r.target.map(|t| t.subject_id),
                                reason: "inter-move",
                            }
                        }
                        InterOutcome::NoCandidate => {
                            report.inter_no_candidate += 1;
                            Decision::new(Verdict::Remove, "inter-no-candidate")
                        }
                        InterOutcome::BelowThreshold => {
                            report.inter_below_threshold += 1;
                            Decision::new(Verdict::Remove, "inter-below-threshold")
                        }
                        InterOutcome::Margin => {
                            report.inter_margin += 1;
                            Decision::new(Verdict::Remove, "inter-margin")
                        }
                    }
                }
            };
            decisions.insert(pos(rep), decision);
        }
    }

    if let Some(digests) = digests {
        resolve_move_collisions(manifest, digests, &mut decisions, &mut report);
    }

    let records = manifest.records();
    let actions: Vec<DedupAction> = decisions
        .into_iter()
        .map(|(i, d)| {
            let r = &records[i];
            DedupAction {
                image_id: r.image_id.clone(),
                dataset_id: r.dataset_id.clone(),
                rel_path: r.rel_path.clone(),
                subject_id: r.subject_id.clone(),
                verdict: d.verdict,
                target_subject: d.target,
                reason: d.reason.to_owned(),
            }
        })
        .collect();
    for a in &actions {
        match a.verdict {
            Verdict::Keep => report.kept += 1,
            Verdict::Remove => report.removed += 1,
            Verdict::Move => report.moved += 1,
        }
    }
    Ok(DedupPlan { actions, report })
}

/// Turns a move into a removal when the target subject already retains a
/// byte-identical file, either untouched or moved there earlier in plan order.
fn resolve_move_collisions(
    manifest: &Manifest,
    digests: &HashMap<ImageId, ContentDigest>,
    decisions: &mut BTreeMap<usize, Decision>,
    report: &mut DedupReport,
) {
    let records = manifest.records();
    let mut retained: HashSet<(SubjectKey, ContentDigest)> = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let stays = decisions.get(&i).is_none_or(|d| d.verdict == Verdict::Keep);
        if let (true, Some(d)) = (stays, digests.get(&r.image_id)) {
            retained.insert((r.subject(), *d));
        }
    }
    let moves: Vec<usize> = decisions
        .iter()
        .filter(|(_, d)| d.verdict == Verdict::Move)
        .map(|(i, _)| *i)
        .collect();
    for i in moves {
        let r = &records[i];
        let Some(digest) = digests.get(&r.image_id) else {
            continue;
        };
        let d = decisions.get_mut(&i).expect("present");
        let target = SubjectKey::new(&r.dataset_id, d.target.clone().expect("moves have targets"));
        if !retained.insert((target.clone(), *digest)) {
            *d = Decision::new(Verdict::Remove, "move-collision");
            report.move_collisions += 1;
            report
                .warnings
                .push(format!("{}: target subject {target} already holds an identical file", r.image_id));
        }
    }
}

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::plan::{DedupAction, Verdict};
use crate::corpus::{DatasetRoots, ImageId, ImageRecord, Manifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyMode {
    /// Relabel in memory only; paths are unchanged.
    ListOnly,
    /// Copy retained files into `out_root/<dataset>/...`, placing moved
    /// images under their new subject directory.
    Materialize { out_root: PathBuf },
}

/// Applies plan actions to a manifest and returns the deduplicated manifest.
/// In materialize mode the returned records are relative to
/// `out_root/<dataset>`.
pub fn apply_plan(actions: &[DedupAction], manifest: &Manifest, roots: &DatasetRoots, mode: &ApplyMode) -> Result<Manifest> {
    let mut by_id: HashMap<&ImageId, &DedupAction> = HashMap::new();
    for a in actions {
        if !manifest.contains(&a.image_id) {
            return Err(Error::Inconsistent(format!("plan refers to {}, which is not in the manifest", a.image_id)));
        }
        if by_id.insert(&a.image_id, a).is_some() {
            return Err(Error::Inconsistent(format!("plan has several actions for {}", a.image_id)));
        }
    }

    let mut out = Vec::with_capacity(manifest.len());
    let mut moved = Vec::new();
    for r in manifest.records() {
        match by_id.get(&r.image_id) {
            Some(a) if a.verdict == Verdict::Remove => {}
            Some(a) if a.verdict == Verdict::Move => moved.push((r, a.target_subject.clone().expect("moves have targets"))),
            _ => out.push(r.clone()),
        }
    }
    let materialize = matches!(mode, ApplyMode::Materialize { .. });
    let mut taken: BTreeSet<(String, String)> =
        out.iter().map(|r| (r.dataset_id.clone(), r.rel_path.clone())).collect();
    let mut relocated = Vec::new();
    for (r, target) in moved {
        let rel_path = if materialize {
            let file = r.rel_path.rsplit('/').next().unwrap_or(&r.rel_path);
            let plain = format!("{target}/{file}");
            if taken.contains(&(r.dataset_id.clone(), plain.clone())) {
                format!("{target}/{}__{file}", r.subject_id)
            } else {
                plain
            }
        } else {
            r.rel_path.clone()
        };
        if !taken.insert((r.dataset_id.clone(), rel_path.clone())) {
            return Err(Error::Inconsistent(format!("cannot place {} at {rel_path}", r.image_id)));
        }
        relocated.push((r, ImageRecord::new(&r.dataset_id, &target, &rel_path, r.byte_len)));
    }

    if let ApplyMode::Materialize { out_root } = mode {
        let copy = |src: &ImageRecord, dst: &ImageRecord| -> Result<()> {
            let from = roots.resolve(src)?;
            let to = out_root.join(&dst.dataset_id).join(&dst.rel_path);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            Ok(())
        };
        for r in &out {
            copy(r, r)?;
        }
        for (src, dst) in &relocated {
            copy(src, dst)?;
        }
    }
    out.extend(relocated.into_iter().map(|(_, r)| r));
    Manifest::from_records(out)
}

/// Dataset roots of a materialized output tree.
pub fn materialized_roots(manifest: &Manifest, out_root: &Path) -> DatasetRoots {
    DatasetRoots::new(manifest.datasets().iter().map(|d| (d.clone(), out_root.join(d))))
}

//! Line-delimited label records and the effective-label store.
//!
//! A label file holds one JSON record per line:
//! `{"patch_id": "...", "class": "wood", "present": true, "source": "llm", "reason": "..."}`.
//! Human corrections for `labels.jsonl` are appended to the sibling log
//! `labels.corrections.jsonl`; the base file is never rewritten. The effective
//! label of a `(patch, class)` key is the latest human record if any, else the
//! latest llm record.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::types::{ClassName, CoarseLabel, LabelSource, PatchId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordSource {
    Llm,
    Human,
    /// The provider failed or its answer did not parse; `present` is null.
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub patch_id: PatchId,
    pub class: ClassName,
    pub present: Option<bool>,
    pub source: RecordSource,
    pub reason: Option<String>,
}

impl From<&CoarseLabel> for LabelRecord {
    fn from(l: &CoarseLabel) -> Self {
        LabelRecord {
            patch_id: l.patch.clone(),
            class: l.class_name,
            present: Some(l.present),
            source: match l.source {
                LabelSource::Llm => RecordSource::Llm,
                LabelSource::Human => RecordSource::Human,
            },
            reason: l.reason.clone(),
        }
    }
}

impl LabelRecord {
    pub fn to_label(&self) -> Option<CoarseLabel> {
        let source = match self.source {
            RecordSource::Llm => LabelSource::Llm,
            RecordSource::Human => LabelSource::Human,
            RecordSource::Unlabeled => return None,
        };
        Some(CoarseLabel {
            patch: self.patch_id.clone(),
            class_name: self.class,
            present: self.present?,
            source,
            reason: self.reason.clone(),
        })
    }
}

pub fn write_records(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, &out).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<LabelRecord>> {
    let f = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Path of the correction log kept next to a label file.
pub fn corrections_path(labels: &Path) -> PathBuf {
    let stem = labels
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    labels.with_file_name(format!("{stem}.corrections.jsonl"))
}

/// Resolve records to one effective label per key: latest human, else latest llm.
pub fn resolve(records: &[LabelRecord]) -> BTreeMap<(PatchId, ClassName), CoarseLabel> {
    let mut out: BTreeMap<(PatchId, ClassName), CoarseLabel> = BTreeMap::new();
    for rec in records {
        let Some(label) = rec.to_label() else { continue };
        let key = (label.patch.clone(), label.class_name);
        match out.get(&key) {
            Some(cur) if cur.source == LabelSource::Human && label.source == LabelSource::Llm => {}
            _ => {
                out.insert(key, label);
            }
        }
    }
    out
}

/// Effective labels from a label file plus its correction log, if present.
pub fn load_effective(path: &Path) -> Result<Vec<CoarseLabel>> {
    let mut records = read_records(path)?;
    let log = corrections_path(path);
    if log.exists() {
        records.extend(read_records(&log)?);
    }
    Ok(resolve(&records).into_values().collect())
}

/// Append-only label history backed by a base file and its correction log.
#[derive(Debug)]
pub struct LabelStore {
    base: PathBuf,
    log: PathBuf,
    history: Vec<LabelRecord>,
    effective: BTreeMap<(PatchId, ClassName), CoarseLabel>,
}

impl LabelStore {
    /// Open the store for `base`; a missing base file is treated as empty.
    pub fn open(base: &Path) -> Result<Self> {
        let mut history = if base.exists() { read_records(base)? } else { Vec::new() };
        let log = corrections_path(base);
        if log.exists() {
            history.extend(read_records(&log)?);
        }
        let effective = resolve(&history);
        Ok(LabelStore {
            base: base.to_path_buf(),
            log,
            history,
            effective,
        })
    }

    pub fn base_path(&self) -> &Path {
        &self.base
    }

    pub fn history(&self) -> &[LabelRecord] {
        &self.history
    }

    pub fn effective(&self) -> impl Iterator<Item = &CoarseLabel> {
        self.effective.values()
    }

    pub fn get(&self, patch: &PatchId, class: ClassName) -> Option<&CoarseLabel> {
        self.effective.get(&(patch.clone(), class))
    }

    /// All records ever stored for a key, oldest first.
    pub fn history_of(&self, patch: &PatchId, class: ClassName) -> Vec<&LabelRecord> {
        self.history
            .iter()
            .filter(|r| &r.patch_id == patch && r.class == class)
            .collect()
    }

    /// Store a human label. The record is fsync'd to the log before this returns.
    /// Repeating the current effective human label is a no-op.
    pub fn set_human(&mut self, patch: &PatchId, class: ClassName, present: bool) -> Result<CoarseLabel> {
        if let Some(cur) = self.get(patch, class) {
            if cur.source == LabelSource::Human && cur.present == present {
                return Ok(cur.clone());
            }
        }
        let label = CoarseLabel {
            patch: patch.clone(),
            class_name: class,
            present,
            source: LabelSource::Human,
            reason: None,
        };
        let rec = LabelRecord::from(&label);
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log)
            .at(&self.log)?;
        f.write_all(&line).at(&self.log)?;
        f.sync_all().at(&self.log)?;
        self.history.push(rec);
        self.effective.insert((patch.clone(), class), label.clone());
        Ok(label)
    }

    /// Effective labels in key order, as records.
    pub fn export(&self) -> Vec<LabelRecord> {
        self.effective.values().map(LabelRecord::from).collect()
    }

    pub fn human_overrides(&self) -> usize {
        self.effective
            .values()
            .filter(|l| l.source == LabelSource::Human)
            .count()
    }
}

//! Dataset manifests: a JSON list of `{path, label, split, seed}` records.
//! Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(AppError::Usage(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub path: String,
    pub label: usize,
    pub split: Split,
    /// Seed the volume was generated from.
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Checks labels and path uniqueness and sorts records by path.
    pub fn new(mut records: Vec<Record>) -> AppResult<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.label > 1 {
                return Err(AppError::Data(format!("{}: label {} is not 0 or 1", r.path, r.label)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(AppError::Data(format!("duplicate manifest path {}", r.path)));
            }
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self { records })
    }

    pub fn split(&self, split: Split) -> Self {
        Self { records: self.records.iter().filter(|r| r.split == split).cloned().collect() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialize")
    }

    pub fn from_json(text: &str) -> AppResult<Self> {
        let records: Vec<Record> =
            serde_json::from_str(text).map_err(|e| AppError::Data(format!("invalid manifest: {e}")))?;
        Self::new(records)
    }

    /// Counts per `(split, label)`.
    pub fn summary(&self) -> Vec<(Split, usize, usize)> {
        let mut out: Vec<(Split, usize, usize)> = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for label in 0..2 {
                let n = self.records.iter().filter(|r| r.split == split && r.label == label).count();
                if n > 0 {
                    out.push((split, label, n));
                }
            }
        }
        out
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> AppResult<()> {
    fs::write(path, manifest.to_json()).map_err(|e| AppError::io(path, e))
}

pub fn load_manifest(path: &Path) -> AppResult<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    Manifest::from_json(&text).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Records of `split`, in manifest order.
pub fn split_filter(manifest: &Manifest, split: Split) -> Manifest {
    manifest.split(split)
}

/// Resolves a record's volume path against the manifest directory.
pub fn volume_path(data_dir: &Path, record: &Record) -> PathBuf {
    data_dir.join(&record.path)
}

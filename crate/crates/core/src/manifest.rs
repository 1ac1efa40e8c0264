//! Protocol manifests: which tasks exist, which classes or domain each one
//! covers, and where its split files live.
//!
//! Manifests are pretty-printed JSON with a `format_version` field. Relative
//! split paths resolve against the directory holding the manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Class-incremental: tasks carry disjoint class subsets.
    Cil,
    /// Domain-incremental: every task carries every class.
    Dil,
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolKind::Cil => "CIL",
            ProtocolKind::Dil => "DIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Single split triple; absent when the manifest uses `folds`.
    #[serde(default, flatten, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitPaths>,
    /// One split triple per cross-validation fold when `fold_count` is set.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<SplitPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_subset: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl TaskSpec {
    /// The split triples in fold order; a single entry without folds.
    pub fn fold_splits(&self) -> Vec<&SplitPaths> {
        if self.folds.is_empty() {
            self.splits.iter().collect()
        } else {
            self.folds.iter().collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolManifest {
    pub format_version: u32,
    pub protocol: ProtocolKind,
    pub total_classes: usize,
    pub embedding_dim: usize,
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_run_seeds")]
    pub run_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_count: Option<usize>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_run_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl ProtocolManifest {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn fold_total(&self) -> usize {
        self.fold_count.unwrap_or(1)
    }

    /// Classes covered by task `index` (0-based); DIL tasks without an
    /// explicit subset cover every class.
    pub fn task_classes(&self, index: usize) -> Vec<usize> {
        match &self.tasks[index].class_subset {
            Some(s) => s.clone(),
            None => (0..self.total_classes).collect(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.total_classes == 0 || self.embedding_dim == 0 {
            return Err(Error::Manifest(
                "total_classes and embedding_dim must be positive".into(),
            ));
        }
        if self.tasks.len() < 2 {
            return Err(Error::Manifest(format!(
                "need at least 2 tasks, found {}",
                self.tasks.len()
            )));
        }
        if self.run_seeds.is_empty() {
            return Err(Error::Manifest("run_seeds is empty".into()));
        }
        if self.fold_count == Some(0) {
            return Err(Error::Manifest("fold_count must be positive".into()));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            if task.task_id != i + 1 {
                return Err(Error::Manifest(format!(
                    "task at position {} has task_id {}, expected {}",
                    i + 1,
                    task.task_id,
                    i + 1
                )));
            }
            match self.fold_count {
                None if task.splits.is_none() || !task.folds.is_empty() => {
                    return Err(Error::Manifest(format!(
                        "task {} must give train/validation/test and no folds",
                        task.task_id
                    )));
                }
                Some(k) if task.folds.len() != k => {
                    return Err(Error::Manifest(format!(
                        "task {} lists {} folds, fold_count is {k}",
                        task.task_id,
                        task.folds.len()
                    )));
                }
                _ => {}
            }
            if let Some(subset) = &task.class_subset {
                if let Some(&c) = subset.iter().find(|&&c| c >= self.total_classes) {
                    return Err(Error::Manifest(format!(
                        "task {} lists class {c} but total_classes is {}",
                        task.task_id, self.total_classes
                    )));
                }
                let unique: BTreeSet<_> = subset.iter().collect();
                if unique.len() != subset.len() {
                    return Err(Error::Manifest(format!(
                        "task {} repeats a class",
                        task.task_id
                    )));
                }
            }
        }
        match self.protocol {
            ProtocolKind::Cil => self.validate_cil(),
            ProtocolKind::Dil => self.validate_dil(),
        }
    }

    fn validate_cil(&self) -> Result<()> {
        let mut owner = vec![0usize; self.total_classes];
        for task in &self.tasks {
            let subset = task.class_subset.as_ref().ok_or_else(|| {
                Error::Manifest(format!("CIL task {} has no class_subset", task.task_id))
            })?;
            if subset.is_empty() {
                return Err(Error::Manifest(format!(
                    "CIL task {} has an empty class_subset",
                    task.task_id
                )));
            }
            for &c in subset {
                if owner[c] != 0 {
                    return Err(Error::Manifest(format!(
                        "class {c} appears in both task {} and task {}: CIL class subsets must be disjoint",
                        owner[c], task.task_id
                    )));
                }
                owner[c] = task.task_id;
            }
        }
        if let Some(c) = owner.iter().position(|&o| o == 0) {
            return Err(Error::Manifest(format!(
                "class {c} is not assigned to any CIL task"
            )));
        }
        Ok(())
    }

    fn validate_dil(&self) -> Result<()> {
        for task in &self.tasks {
            if let Some(subset) = &task.class_subset {
                if subset.len() != self.total_classes {
                    let have: BTreeSet<_> = subset.iter().copied().collect();
                    let missing = (0..self.total_classes).find(|c| !have.contains(c)).unwrap();
                    return Err(Error::Manifest(format!(
                        "DIL task {} is missing class {missing}",
                        task.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every split path resolved against `base_dir`, in task then fold order.
    pub fn all_split_paths(&self) -> Vec<PathBuf> {
        self.tasks
            .iter()
            .flat_map(|t| t.fold_splits())
            .flat_map(|s| [&s.train, &s.validation, &s.test])
            .map(|p| self.resolve(p))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Parses a manifest and checks it eagerly, including that every referenced
/// split file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ProtocolManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut manifest = parse_manifest(&text)?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    if let Some(missing) = manifest.all_split_paths().into_iter().find(|p| !p.is_file()) {
        return Err(Error::DanglingReference(missing));
    }
    Ok(manifest)
}

/// Parses and validates manifest text without touching split files.
pub fn parse_manifest(text: &str) -> Result<ProtocolManifest> {
    let manifest: ProtocolManifest = serde_json::from_str(text)?;
    manifest.validate()?;
    Ok(manifest)
}

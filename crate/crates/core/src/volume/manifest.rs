use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Contrast;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub files: BTreeMap<Contrast, PathBuf>,
}

/// Subjects, their per-contrast files, and the train/val/test assignment.
///
/// Relative file paths are resolved against the directory the manifest was
/// loaded from. Subjects without a split entry are not used by any split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub split: BTreeMap<String, Split>,
    #[serde(skip)]
    root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            entries,
            split: BTreeMap::new(),
            root: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Scans a directory for IXI-style files `<Subject>-<Site>-<Num>-<Contrast>.nii(.gz)`.
    /// Files whose contrast is not T1/T2/PD are skipped.
    pub fn from_directory(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut by_subject: BTreeMap<String, BTreeMap<Contrast, PathBuf>> = BTreeMap::new();
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if let Some((subject, contrast)) = parse_ixi_name(&path) {
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_path_buf();
                by_subject.entry(subject).or_default().insert(contrast, rel);
            }
        }
        let entries = by_subject
            .into_iter()
            .map(|(subject_id, files)| ManifestEntry { subject_id, files })
            .collect();
        let mut m = DatasetManifest::new(entries);
        m.root = Some(dir.to_path_buf());
        Ok(m)
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = Some(root.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::Config(format!("duplicate subject {}", e.subject_id)));
            }
        }
        if let Some(s) = self.split.keys().find(|s| !seen.contains(s.as_str())) {
            return Err(Error::UnknownSubject(s.clone()));
        }
        Ok(())
    }

    pub fn entry(&self, subject: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.subject_id == subject)
            .ok_or_else(|| Error::UnknownSubject(subject.to_string()))
    }

    /// Resolved path of a subject's volume for one contrast.
    pub fn path_of(&self, subject: &str, contrast: Contrast) -> Result<PathBuf> {
        let rel = self
            .entry(subject)?
            .files
            .get(&contrast)
            .ok_or_else(|| Error::MissingContrast {
                subject: subject.to_string(),
                contrast: contrast.to_string(),
            })?;
        Ok(match &self.root {
            Some(root) if rel.is_relative() => root.join(rel),
            _ => rel.clone(),
        })
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        self.split.get(subject).copied()
    }

    /// Subjects assigned to `split`, in manifest order.
    pub fn subjects_in(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| self.split.get(&e.subject_id) == Some(&split))
            .map(|e| e.subject_id.as_str())
            .collect()
    }

    pub fn has_contrasts(&self, subject: &str, contrasts: &[Contrast]) -> bool {
        self.entry(subject)
            .map(|e| contrasts.iter().all(|c| e.files.contains_key(c)))
            .unwrap_or(false)
    }
}

/// Deterministically assigns `counts` subjects to train/val/test.
///
/// Subjects are sorted by id before shuffling, so the result depends only on
/// the set of subjects, the counts and the seed.
pub fn split_subjects(manifest: &DatasetManifest, counts: SplitCounts, seed: u64) -> Result<DatasetManifest> {
    let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.subject_id.as_str()).collect();
    if ids.len() < counts.total() {
        return Err(Error::InsufficientSubjects {
            have: ids.len(),
            need: counts.total(),
        });
    }
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let mut out = manifest.clone();
    out.split.clear();
    let plan = [
        (Split::Train, counts.train),
        (Split::Val, counts.val),
        (Split::Test, counts.test),
    ];
    let mut it = ids.into_iter();
    for (split, n) in plan {
        for id in it.by_ref().take(n) {
            out.split.insert(id.to_string(), split);
        }
    }
    Ok(out)
}

/// Parses `<Subject>-<Site>-<Num>-<Contrast>.nii[.gz]` into (subject, contrast).
pub(crate) fn parse_ixi_name(path: &Path) -> Option<(String, Contrast)> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() < 4 || parts[0].is_empty() {
        return None;
    }
    let contrast = parts.last()?.parse().ok()?;
    Some((parts[0].to_string(), contrast))
}

//! Two-stage experiment bookkeeping: what each stage consumed, and a check
//! that nothing belonging to the extension languages reached the base stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Extension,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    /// Language ids read off the file name.
    pub languages: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub languages: BTreeSet<String>,
    pub files: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Language ids named by a corpus file: `<l>.mono.txt`, `<a>-<b>[.split].{src,tgt}.txt`,
/// `dict.<a>-<b>.txt`. Unknown layouts name no language.
pub fn languages_in_name(path: &Path) -> BTreeSet<String> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let name = name.strip_prefix("dict.").unwrap_or(name);
    let head = name.split('.').next().unwrap_or_default();
    let parts: Vec<&str> = head.split('-').collect();
    let is_id = |s: &str| crate::vocab::validate_language_id(s).is_ok();
    if name.contains('.') && !parts.is_empty() && parts.len() <= 2 && parts.iter().all(|p| is_id(p)) {
        parts.into_iter().map(String::from).collect()
    } else {
        BTreeSet::new()
    }
}

impl StageManifest {
    /// Hash `files` as consumed by `stage`.
    pub fn scan(stage: Stage, languages: &[String], files: &[PathBuf]) -> Result<Self> {
        let files = files
            .iter()
            .map(|p| Ok(FileRecord { path: p.clone(), sha256: sha256_file(p)?, languages: languages_in_name(p) }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stage, languages: languages.iter().cloned().collect(), files })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub file: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IsolationReport {
    pub new_languages: BTreeSet<String>,
    pub violations: Vec<Violation>,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every base-stage file that names an extension-only language, or whose
/// content matches an extension-only file, is one violation.
pub fn verify_stage_isolation(base: &StageManifest, extension: &StageManifest) -> Result<IsolationReport> {
    if base.stage != Stage::Base || extension.stage != Stage::Extension {
        return Err(Error::Config("expected one base and one extension manifest".into()));
    }
    let new_languages: BTreeSet<String> = extension.languages.difference(&base.languages).cloned().collect();
    let mut new_hashes: BTreeMap<&str, &Path> = BTreeMap::new();
    for f in &extension.files {
        if !f.languages.is_disjoint(&new_languages) {
            new_hashes.insert(&f.sha256, &f.path);
        }
    }
    let mut violations = Vec::new();
    for f in &base.files {
        let named: Vec<&String> = f.languages.intersection(&new_languages).collect();
        let reason = if !named.is_empty() {
            Some(format!("names extension language {}", named.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")))
        } else {
            new_hashes.get(f.sha256.as_str()).map(|p| format!("content identical to extension file {}", p.display()))
        };
        if let Some(reason) = reason {
            log::warn!("stage leak: {}: {reason}", f.path.display());
            violations.push(Violation { file: f.path.clone(), reason });
        }
    }
    Ok(IsolationReport { new_languages, violations })
}

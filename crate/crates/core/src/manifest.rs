//! On-disk dataset index: a JSON file mapping subject ids to their
//! per-modality volume files and optional truth mask, with paths relative to
//! the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vol::io::{load_mask, load_volume};
use crate::vol::{MaskVolume, VolError, Volume};

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error(transparent)]
    Vol(#[from] VolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Healthy,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub role: Role,
    /// Relative paths, one per modality in manifest order.
    pub volumes: Vec<String>,
    /// Relative path of the lesion mask; absent for healthy subjects.
    pub truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: [usize; 3],
    pub modalities: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf), ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        if manifest.version != 1 {
            return Err(ManifestError::Version(manifest.version));
        }
        let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((manifest, dir))
    }

    pub fn healthy(&self) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(|s| s.role == Role::Healthy)
    }

    pub fn abnormal(&self) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(|s| s.role == Role::Abnormal)
    }
}

impl SubjectEntry {
    /// Load this subject's modality volumes from disk.
    pub fn load_volumes(&self, dir: &Path) -> Result<Vec<Volume>, ManifestError> {
        self.volumes.iter().map(|v| Ok(load_volume(dir.join(v))?)).collect()
    }

    pub fn load_truth(&self, dir: &Path) -> Result<Option<MaskVolume>, ManifestError> {
        match &self.truth {
            Some(t) => Ok(Some(load_mask(dir.join(t))?)),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            version: 1,
            dims: [16, 16, 16],
            modalities: vec!["m1".into(), "m2".into()],
            subjects: vec![SubjectEntry {
                id: "s000".into(),
                role: Role::Healthy,
                volumes: vec!["s000_m1.vv1".into(), "s000_m2.vv1".into()],
                truth: None,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let (back, base) = DatasetManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(base, dir.path());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(
            &p,
            r#"{"version":1,"dims":[8,8,8],"modalities":[],"subjects":[],"extra":true}"#,
        )
        .unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(ManifestError::Malformed(_))));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, r#"{"version":2,"dims":[8,8,8],"modalities":[],"subjects":[]}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(ManifestError::Version(2))));
    }
}

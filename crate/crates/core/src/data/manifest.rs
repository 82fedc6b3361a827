use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::Split;
use super::{FenceLabel, Source};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub path: String,
    pub source: Source,
    pub fence: FenceLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// Manifest entries plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = fsutil::read_json(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, entries };
        m.check_masks()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, &self.entries)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    /// Every declared mask path must exist.
    pub fn check_masks(&self) -> Result<()> {
        for e in &self.entries {
            if let Some(m) = &e.mask_path {
                let p = self.resolve(m);
                if !p.is_file() {
                    return Err(Error::Data(format!(
                        "mask for {} not found at {}",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

//! Image manifest: which image belongs to which identity, each identity's
//! twin (if any), and the train/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AhanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub identity_id: String,
    /// Empty in CSV form when the identity has no twin.
    #[serde(with = "optional_string")]
    pub twin_identity_id: Option<String>,
    pub split: Split,
    pub path: PathBuf,
}

mod optional_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.as_deref().unwrap_or(""))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
        let s = String::deserialize(d)?;
        Ok((!s.is_empty()).then_some(s))
    }
}

/// Validated entries. Image ids are unique; each identity names at most one
/// twin, never itself, and the relation is symmetric wherever both sides
/// appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwinManifest {
    entries: Vec<ManifestEntry>,
}

impl TwinManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(AhanError::invalid("manifest", "no entries"));
        }
        let mut seen = HashSet::new();
        let mut twin_of: BTreeMap<&str, Option<&str>> = BTreeMap::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(AhanError::invalid(
                    "manifest",
                    format!("duplicate image id `{}`", e.image_id),
                ));
            }
            let twin = e.twin_identity_id.as_deref();
            if twin == Some(e.identity_id.as_str()) {
                return Err(AhanError::invalid(
                    "manifest",
                    format!("identity `{}` is listed as its own twin", e.identity_id),
                ));
            }
            match twin_of.insert(&e.identity_id, twin) {
                Some(prev) if prev != twin => {
                    return Err(AhanError::invalid(
                        "manifest",
                        format!("identity `{}` has conflicting twins", e.identity_id),
                    ))
                }
                _ => {}
            }
        }
        for (&id, &twin) in &twin_of {
            if let Some(t) = twin {
                if let Some(&back) = twin_of.get(t) {
                    if back != Some(id) {
                        return Err(AhanError::invalid(
                            "manifest",
                            format!("twin relation is not symmetric: `{id}` -> `{t}`"),
                        ));
                    }
                }
            }
        }
        Ok(TwinManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one split; errors when that split is empty.
    pub fn split(&self, split: Split) -> Result<TwinManifest> {
        let entries: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect();
        if entries.is_empty() {
            return Err(AhanError::invalid(
                "manifest",
                format!("split {split:?} has no entries"),
            ));
        }
        Ok(TwinManifest { entries })
    }

    /// Identity ids in sorted order; an identity's position is its class index.
    pub fn identities(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.identity_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn twin_of(&self, identity: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.identity_id == identity)
            .and_then(|e| e.twin_identity_id.as_deref())
    }

    /// Entry indices grouped by identity, in [`TwinManifest::identities`] order.
    pub fn images_by_identity(&self) -> Vec<Vec<usize>> {
        let ids = self.identities();
        let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut out = vec![Vec::new(); ids.len()];
        for (i, e) in self.entries.iter().enumerate() {
            out[pos[e.identity_id.as_str()]].push(i);
        }
        out
    }

    /// Class index of each identity's twin, when the twin is present here.
    pub fn twin_classes(&self) -> Vec<Option<usize>> {
        let ids = self.identities();
        let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        ids.iter()
            .map(|id| self.twin_of(id).and_then(|t| pos.get(t).copied()))
            .collect()
    }

    /// Class index of every entry.
    pub fn labels(&self) -> Vec<usize> {
        let ids = self.identities();
        self.entries
            .iter()
            .map(|e| ids.binary_search(&e.identity_id).expect("identity listed"))
            .collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Self::new(entries)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            writer.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| AhanError::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> AhanError {
    AhanError::format(path, e.to_string())
}

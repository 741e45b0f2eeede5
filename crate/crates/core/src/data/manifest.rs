use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io, DataError, LabelMap, Result, Volume};

/// One (volume, label map) pair. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub volume: PathBuf,
    pub labelmap: PathBuf,
}

/// A dataset: id, dense label vocabulary (index = label id, 0 = background),
/// its cases and the seed it was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub id: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub cases: Vec<Case>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn volume_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.cases[i].volume)
    }

    pub fn labelmap_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.cases[i].labelmap)
    }

    pub fn load_case(&self, i: usize) -> Result<(Volume, LabelMap)> {
        let (v, embedded) = io::load_volume(self.volume_path(i))?;
        let l = match embedded {
            Some(l) if self.cases[i].labelmap == self.cases[i].volume => l,
            _ => io::load_labelmap(self.labelmap_path(i))?,
        };
        if l.dims() != v.dims() {
            return Err(DataError::Invariant(format!(
                "case {i} of '{}': label shape {:?} differs from volume shape {:?}",
                self.id,
                l.dims(),
                v.dims()
            )));
        }
        Ok((v, l))
    }

    /// Checks the vocabulary shape without touching case files.
    pub fn check_vocabulary(&self) -> Result<()> {
        if self.labels.first().map(String::as_str) != Some("background") {
            return Err(DataError::Invariant(format!(
                "dataset '{}': label 0 must be named 'background'",
                self.id
            )));
        }
        if self.labels.len() > 256 {
            return Err(DataError::Invariant(format!("dataset '{}': too many labels", self.id)));
        }
        Ok(())
    }

    /// Loads every case and checks that label values fit the vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.check_vocabulary()?;
        for i in 0..self.cases.len() {
            let (_, l) = self.load_case(i)?;
            if let Some(&bad) = l.classes().iter().find(|&&c| c as usize >= self.labels.len()) {
                return Err(DataError::Invariant(format!(
                    "dataset '{}', case {i}: label {bad} outside vocabulary of {} classes",
                    self.id,
                    self.labels.len()
                )));
            }
            let file_vocab = io::load_vocabulary(&self.labelmap_path(i))?;
            if !file_vocab.is_empty() && file_vocab != self.labels {
                return Err(DataError::Invariant(format!(
                    "dataset '{}', case {i}: file vocabulary {file_vocab:?} differs from manifest",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a manifest; case paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_vocabulary()?;
        for i in 0..m.cases.len() {
            for p in [m.volume_path(i), m.labelmap_path(i)] {
                if !p.exists() {
                    return Err(DataError::Manifest {
                        path: path.to_path_buf(),
                        msg: format!("listed file {} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(m)
    }
}

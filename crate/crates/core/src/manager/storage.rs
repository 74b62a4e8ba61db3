//! Persistence backends for shells and submodels.
//!
//! The directory backend writes one pretty-printed JSON document per object:
//! `<root>/shells/<urlencoded-id>.json` and `<root>/submodels/<urlencoded-id>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use thiserror::Error;

use crate::model::{AasId, AssetAdministrationShell, Submodel};

const FILE_NAME: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_');

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt stored document {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("storage failure: {0}")]
    Injected(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoredState {
    pub shells: BTreeMap<AasId, AssetAdministrationShell>,
    pub submodels: BTreeMap<AasId, Submodel>,
}

/// Persistence seam of the repository.
pub trait Storage: Send {
    fn load(&self) -> Result<StoredState, StorageError>;
    fn put_shell(&mut self, shell: &AssetAdministrationShell) -> Result<(), StorageError>;
    fn delete_shell(&mut self, id: &AasId) -> Result<(), StorageError>;
    fn put_submodel(&mut self, submodel: &Submodel) -> Result<(), StorageError>;
    fn delete_submodel(&mut self, id: &AasId) -> Result<(), StorageError>;
}

/// In-memory backend with optional write-failure injection.
#[derive(Debug, Default)]
pub struct MemoryStorage {
    state: StoredState,
    fail_after: Option<usize>,
    writes: usize,
}

impl MemoryStorage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every write after the first `n` successful ones fails.
    pub fn failing_after(n: usize) -> Self {
        Self {
            fail_after: Some(n),
            ..Self::default()
        }
    }

    fn write(&mut self) -> Result<(), StorageError> {
        if self.fail_after.is_some_and(|n| self.writes >= n) {
            return Err(StorageError::Injected(format!("write #{} refused", self.writes + 1)));
        }
        self.writes += 1;
        Ok(())
    }
}

impl Storage for MemoryStorage {
    fn load(&self) -> Result<StoredState, StorageError> {
        Ok(self.state.clone())
    }

    fn put_shell(&mut self, shell: &AssetAdministrationShell) -> Result<(), StorageError> {
        self.write()?;
        self.state.shells.insert(shell.id.clone(), shell.clone());
        Ok(())
    }

    fn delete_shell(&mut self, id: &AasId) -> Result<(), StorageError> {
        self.write()?;
        self.state.shells.remove(id);
        Ok(())
    }

    fn put_submodel(&mut self, submodel: &Submodel) -> Result<(), StorageError> {
        self.write()?;
        self.state.submodels.insert(submodel.id.clone(), submodel.clone());
        Ok(())
    }

    fn delete_submodel(&mut self, id: &AasId) -> Result<(), StorageError> {
        self.write()?;
        self.state.submodels.remove(id);
        Ok(())
    }
}

/// JSON-document-per-object directory backend.
#[derive(Debug, Clone)]
pub struct DirStorage {
    root: PathBuf,
}

impl DirStorage {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        for sub in ["shells", "submodels"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|source| StorageError::Io { path: dir, source })?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file_name(id: &AasId) -> String {
        format!("{}.json", utf8_percent_encode(id.as_str(), FILE_NAME))
    }

    fn path(&self, kind: &str, id: &AasId) -> PathBuf {
        self.root.join(kind).join(Self::file_name(id))
    }

    fn put<T: serde::Serialize>(&self, kind: &str, id: &AasId, value: &T) -> Result<(), StorageError> {
        let path = self.path(kind, id);
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| StorageError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        bytes.push(b'\n');
        let tmp = path.with_extension("json.tmp");
        let io = |source| StorageError::Io {
            path: path.clone(),
            source,
        };
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }

    fn delete(&self, kind: &str, id: &AasId) -> Result<(), StorageError> {
        let path = self.path(kind, id);
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(source) => Err(StorageError::Io { path, source }),
        }
    }

    fn load_kind<T: serde::de::DeserializeOwned>(&self, kind: &str) -> Result<Vec<(AasId, T)>, StorageError> {
        let dir = self.root.join(kind);
        let mut out = Vec::new();
        let entries = fs::read_dir(&dir).map_err(|source| StorageError::Io {
            path: dir.clone(),
            source,
        })?;
        for entry in entries {
            let path = entry
                .map_err(|source| StorageError::Io {
                    path: dir.clone(),
                    source,
                })?
                .path();
            let Some(stem) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".json"))
            else {
                continue;
            };
            let corrupt = |message: String| StorageError::Corrupt {
                path: path.clone(),
                message,
            };
            let id = percent_decode_str(stem)
                .decode_utf8()
                .map_err(|e| corrupt(e.to_string()))
                .and_then(|s| AasId::new(s.into_owned()).map_err(|e| corrupt(e.to_string())))?;
            let bytes = fs::read(&path).map_err(|source| StorageError::Io {
                path: path.clone(),
                source,
            })?;
            let value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
            out.push((id, value));
        }
        Ok(out)
    }
}

impl Storage for DirStorage {
    fn load(&self) -> Result<StoredState, StorageError> {
        let mut state = StoredState::default();
        for (id, shell) in self.load_kind::<AssetAdministrationShell>("shells")? {
            if shell.id != id {
                return Err(StorageError::Corrupt {
                    path: self.path("shells", &id),
                    message: format!("file name does not match id {}", shell.id),
                });
            }
            state.shells.insert(id, shell);
        }
        for (id, sm) in self.load_kind::<Submodel>("submodels")? {
            if sm.id != id {
                return Err(StorageError::Corrupt {
                    path: self.path("submodels", &id),
                    message: format!("file name does not match id {}", sm.id),
                });
            }
            sm.validate().map_err(|e| StorageError::Corrupt {
                path: self.path("submodels", &id),
                message: e.to_string(),
            })?;
            state.submodels.insert(id, sm);
        }
        Ok(state)
    }

    fn put_shell(&mut self, shell: &AssetAdministrationShell) -> Result<(), StorageError> {
        self.put("shells", &shell.id, shell)
    }

    fn delete_shell(&mut self, id: &AasId) -> Result<(), StorageError> {
        self.delete("shells", id)
    }

    fn put_submodel(&mut self, submodel: &Submodel) -> Result<(), StorageError> {
        self.put("submodels", &submodel.id, submodel)
    }

    fn delete_submodel(&mut self, id: &AasId) -> Result<(), StorageError> {
        self.delete("submodels", id)
    }
}

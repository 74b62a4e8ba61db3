//! Content-addressed, versioned storage of service build contexts.
//!
//! Disk layout: `<root>/<service_id>/<content_hash>/meta.json` plus the context
//! files under `<root>/<service_id>/<content_hash>/tree/`. A version directory is
//! written under a temporary name and renamed into place, so it is either
//! complete or absent. Stored trees are never modified.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::journal::CallLog;
use crate::model::IdShort;
use crate::package::{tree_hash, ServiceContextEntry, CONTAINERFILE};

/// Context files by relative path, the containerfile included.
pub type ContextTree = BTreeMap<String, Vec<u8>>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown context {service_id}@{content_hash}")]
    UnknownContext { service_id: IdShort, content_hash: String },
    #[error("context store I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt stored context {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("context rejected: {0}")]
    Invalid(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredContext {
    pub service_id: IdShort,
    pub declared_version: String,
    pub content_hash: String,
    pub stored_at: Timestamp,
    /// Store-wide insertion counter; orders versions independently of the clock.
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StoreReceipt {
    pub content_hash: String,
    /// False when an identical context was already stored.
    pub newly_stored: bool,
}

enum Backend {
    Memory(BTreeMap<(IdShort, String), ContextTree>),
    Disk(PathBuf),
}

struct Inner {
    backend: Backend,
    index: BTreeMap<IdShort, Vec<StoredContext>>,
    next_sequence: u64,
}

pub struct ContextStore {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    journal: Option<Arc<CallLog>>,
}

impl std::fmt::Debug for ContextStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContextStore").finish_non_exhaustive()
    }
}

fn is_safe_relative(path: &str) -> bool {
    crate::model::is_relative_path(path) && !path.split('/').any(str::is_empty)
}

impl ContextStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                backend: Backend::Memory(BTreeMap::new()),
                index: BTreeMap::new(),
                next_sequence: 1,
            }),
            clock,
            journal: None,
        }
    }

    /// Opens (creating if needed) a store rooted at `root` and indexes existing versions.
    pub fn open(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        let mut index: BTreeMap<IdShort, Vec<StoredContext>> = BTreeMap::new();
        let mut next_sequence = 1;
        for service_dir in fs::read_dir(&root).map_err(io(&root))? {
            let service_dir = service_dir.map_err(io(&root))?.path();
            if !service_dir.is_dir() {
                continue;
            }
            for version_dir in fs::read_dir(&service_dir).map_err(io(&service_dir))? {
                let version_dir = version_dir.map_err(io(&service_dir))?.path();
                let name = version_dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with('.') {
                    // Leftover of an interrupted write.
                    let _ = fs::remove_dir_all(&version_dir);
                    continue;
                }
                let meta_path = version_dir.join("meta.json");
                let bytes = fs::read(&meta_path).map_err(io(&meta_path))?;
                let meta: StoredContext = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                    path: meta_path.clone(),
                    message: e.to_string(),
                })?;
                next_sequence = next_sequence.max(meta.sequence + 1);
                index.entry(meta.service_id.clone()).or_default().push(meta);
            }
        }
        for versions in index.values_mut() {
            versions.sort_by_key(|m| std::cmp::Reverse(m.sequence));
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                backend: Backend::Disk(root),
                index,
                next_sequence,
            }),
            clock,
            journal: None,
        })
    }

    pub fn with_call_log(mut self, log: Arc<CallLog>) -> Self {
        self.journal = Some(log);
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Persists a context. Storing an identical context again is a no-op.
    pub fn store_context(&self, entry: &ServiceContextEntry) -> Result<StoreReceipt, StoreError> {
        let tree = entry.tree();
        if entry.containerfile.is_empty() {
            return Err(StoreError::Invalid("empty containerfile".into()));
        }
        if let Some(bad) = tree.keys().find(|p| !is_safe_relative(p)) {
            return Err(StoreError::Invalid(format!("unsafe path {bad:?}")));
        }
        let hash = tree_hash(tree.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
        if hash != entry.content_hash {
            return Err(StoreError::Invalid(format!(
                "declared hash {} does not match content {hash}",
                entry.content_hash
            )));
        }
        let mut inner = self.lock();
        if let Some(log) = &self.journal {
            log.record(format!("store.store_context {} {hash}", entry.service_id));
        }
        let exists = inner
            .index
            .get(&entry.service_id)
            .is_some_and(|v| v.iter().any(|m| m.content_hash == hash));
        if exists {
            return Ok(StoreReceipt {
                content_hash: hash,
                newly_stored: false,
            });
        }
        let meta = StoredContext {
            service_id: entry.service_id.clone(),
            declared_version: entry.declared_version.clone(),
            content_hash: hash.clone(),
            stored_at: self.clock.now(),
            sequence: inner.next_sequence,
        };
        match &mut inner.backend {
            Backend::Memory(trees) => {
                trees.insert((entry.service_id.clone(), hash.clone()), tree);
            }
            Backend::Disk(root) => write_version(root, &meta, &tree)?,
        }
        inner.next_sequence += 1;
        inner.index.entry(entry.service_id.clone()).or_default().insert(0, meta);
        Ok(StoreReceipt {
            content_hash: hash,
            newly_stored: true,
        })
    }

    pub fn retrieve_context(&self, service_id: &IdShort, content_hash: &str) -> Result<ContextTree, StoreError> {
        let unknown = || StoreError::UnknownContext {
            service_id: service_id.clone(),
            content_hash: content_hash.to_string(),
        };
        let inner = self.lock();
        let known = inner
            .index
            .get(service_id)
            .is_some_and(|v| v.iter().any(|m| m.content_hash == content_hash));
        if !known {
            return Err(unknown());
        }
        match &inner.backend {
            Backend::Memory(trees) => trees
                .get(&(service_id.clone(), content_hash.to_string()))
                .cloned()
                .ok_or_else(unknown),
            Backend::Disk(root) => {
                let dir = root.join(service_id.as_str()).join(content_hash).join("tree");
                let tree = read_tree(&dir)?;
                let actual = tree_hash(tree.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
                if actual != content_hash {
                    return Err(StoreError::Corrupt {
                        path: dir,
                        message: format!("content hashes to {actual}"),
                    });
                }
                Ok(tree)
            }
        }
    }

    pub fn contains(&self, service_id: &IdShort, content_hash: &str) -> bool {
        self.lock()
            .index
            .get(service_id)
            .is_some_and(|v| v.iter().any(|m| m.content_hash == content_hash))
    }

    /// Versions of one service, newest first.
    pub fn list_versions(&self, service_id: &IdShort) -> Vec<StoredContext> {
        self.lock().index.get(service_id).cloned().unwrap_or_default()
    }

    /// Every stored version, grouped by service id, newest first within a service.
    pub fn list_all(&self) -> Vec<StoredContext> {
        self.lock().index.values().flatten().cloned().collect()
    }

    /// Deletes every version not named in `keep` and returns what was deleted.
    pub fn gc(&self, keep: &BTreeSet<(IdShort, String)>) -> Result<Vec<StoredContext>, StoreError> {
        let doomed: Vec<StoredContext> = self
            .list_all()
            .into_iter()
            .filter(|m| !keep.contains(&(m.service_id.clone(), m.content_hash.clone())))
            .collect();
        for m in &doomed {
            self.discard(&m.service_id, &m.content_hash)?;
        }
        Ok(doomed)
    }

    /// Removes one version; used by GC and by import rollback.
    pub(crate) fn discard(&self, service_id: &IdShort, content_hash: &str) -> Result<(), StoreError> {
        let mut inner = self.lock();
        if let Some(versions) = inner.index.get_mut(service_id) {
            versions.retain(|m| m.content_hash != content_hash);
            if versions.is_empty() {
                inner.index.remove(service_id);
            }
        }
        match &mut inner.backend {
            Backend::Memory(trees) => {
                trees.remove(&(service_id.clone(), content_hash.to_string()));
            }
            Backend::Disk(root) => {
                let service_dir = root.join(service_id.as_str());
                let dir = service_dir.join(content_hash);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(io(&dir))?;
                }
                if fs::read_dir(&service_dir).is_ok_and(|mut d| d.next().is_none()) {
                    fs::remove_dir(&service_dir).map_err(io(&service_dir))?;
                }
            }
        }
        Ok(())
    }
}

fn write_version(root: &Path, meta: &StoredContext, tree: &ContextTree) -> Result<(), StoreError> {
    let service_dir = root.join(meta.service_id.as_str());
    let staging = service_dir.join(format!(".staging-{}", meta.content_hash));
    let result = (|| {
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(&staging))?;
        }
        for (path, content) in tree {
            let target = staging.join("tree").join(path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            fs::write(&target, content).map_err(io(&target))?;
        }
        let meta_path = staging.join("meta.json");
        let json = serde_json::to_vec_pretty(meta).expect("meta serializes");
        fs::write(&meta_path, json).map_err(io(&meta_path))?;
        let final_dir = service_dir.join(&meta.content_hash);
        fs::rename(&staging, &final_dir).map_err(io(&final_dir))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
        if fs::read_dir(&service_dir).is_ok_and(|mut d| d.next().is_none()) {
            let _ = fs::remove_dir(&service_dir);
        }
    }
    result
}

fn read_tree(dir: &Path) -> Result<ContextTree, StoreError> {
    fn walk(base: &Path, dir: &Path, out: &mut ContextTree) -> Result<(), StoreError> {
        for entry in fs::read_dir(dir).map_err(io(dir))? {
            let path = entry.map_err(io(dir))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("walk stays under base");
                let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.insert(rel.join("/"), fs::read(&path).map_err(io(&path))?);
            }
        }
        Ok(())
    }
    let mut tree = ContextTree::new();
    walk(dir, dir, &mut tree)?;
    if !tree.contains_key(CONTAINERFILE) {
        return Err(StoreError::Corrupt {
            path: dir.to_path_buf(),
            message: "containerfile missing".into(),
        });
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::clock::ManualClock;

    fn entry(containerfile: &[u8]) -> ServiceContextEntry {
        let mut files = BTreeMap::new();
        files.insert("src/app.py".to_string(), b"print('hi')\n".to_vec());
        ServiceContextEntry::new(IdShort::new("svc").unwrap(), "1.0.0", containerfile.to_vec(), files)
    }

    fn stores() -> Vec<(ContextStore, Option<tempfile::TempDir>)> {
        let clock = Arc::new(ManualClock::default());
        let dir = tempfile::tempdir().unwrap();
        vec![
            (ContextStore::in_memory(clock.clone()), None),
            (ContextStore::open(dir.path().join("contexts"), clock).unwrap(), Some(dir)),
        ]
    }

    #[test]
    fn store_is_idempotent_and_round_trips() {
        for (store, _dir) in stores() {
            let e = entry(b"FROM alpine\n");
            let a = store.store_context(&e).unwrap();
            let b = store.store_context(&e).unwrap();
            assert!(a.newly_stored && !b.newly_stored);
            assert_eq!(a.content_hash, b.content_hash);
            assert_eq!(store.list_versions(&e.service_id).len(), 1);
            assert_eq!(store.retrieve_context(&e.service_id, &a.content_hash).unwrap(), e.tree());
        }
    }

    #[test]
    fn one_byte_difference_is_a_new_version() {
        for (store, _dir) in stores() {
            let h1 = store.store_context(&entry(b"FROM alpine\n")).unwrap().content_hash;
            let h2 = store.store_context(&entry(b"FROM alpine\n\n")).unwrap().content_hash;
            assert_ne!(h1, h2);
            let versions: Vec<String> = store
                .list_versions(&IdShort::new("svc").unwrap())
                .into_iter()
                .map(|m| m.content_hash)
                .collect();
            assert_eq!(versions, vec![h2.clone(), h1.clone()]);
            // Both remain retrievable: nothing is overwritten.
            assert_eq!(store.retrieve_context(&IdShort::new("svc").unwrap(), &h1).unwrap()[CONTAINERFILE], b"FROM alpine\n");
            assert!(matches!(
                store.retrieve_context(&IdShort::new("svc").unwrap(), &"0".repeat(64)),
                Err(StoreError::UnknownContext { .. })
            ));
        }
    }

    #[test]
    fn hash_is_independent_digest() {
        let e = entry(b"FROM alpine\n");
        let mut framed = b"aasrt-context-v1\n".to_vec();
        for (p, c) in e.tree() {
            framed.extend((p.len() as u64).to_be_bytes());
            framed.extend(p.as_bytes());
            framed.extend((c.len() as u64).to_be_bytes());
            framed.extend(c);
        }
        assert_eq!(e.content_hash, hex::encode(Sha256::digest(&framed)));
    }

    #[test]
    fn disk_store_reopens_and_gc() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("contexts");
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::default());
        let (h1, h2) = {
            let store = ContextStore::open(&root, clock.clone()).unwrap();
            let h1 = store.store_context(&entry(b"FROM a\n")).unwrap().content_hash;
            let h2 = store.store_context(&entry(b"FROM b\n")).unwrap().content_hash;
            (h1, h2)
        };
        assert!(root.join("svc").join(&h1).join("meta.json").exists());
        assert!(root.join("svc").join(&h1).join("tree/src/app.py").exists());
        let store = ContextStore::open(&root, clock).unwrap();
        let svc = IdShort::new("svc").unwrap();
        assert_eq!(
            store.list_versions(&svc).iter().map(|m| m.content_hash.clone()).collect::<Vec<_>>(),
            vec![h2.clone(), h1.clone()]
        );
        let removed = store.gc(&BTreeSet::from([(svc.clone(), h2.clone())])).unwrap();
        assert_eq!(removed.len(), 1);
        assert!(!root.join("svc").join(&h1).exists());
        assert!(store.contains(&svc, &h2));
        store.discard(&svc, &h2).unwrap();
        assert!(!root.join("svc").exists());
    }

    #[test]
    fn corrupt_tree_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ContextStore::open(dir.path(), Arc::new(ManualClock::default())).unwrap();
        let h = store.store_context(&entry(b"FROM a\n")).unwrap().content_hash;
        fs::write(dir.path().join("svc").join(&h).join("tree/src/app.py"), b"tampered").unwrap();
        assert!(matches!(
            store.retrieve_context(&IdShort::new("svc").unwrap(), &h),
            Err(StoreError::Corrupt { .. })
        ));
    }
}

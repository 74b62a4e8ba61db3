//! Repository of shells and submodels with CRUD operations.
//!
//! All mutations are serialized by one lock and emit their lifecycle events
//! while holding it, so event order always matches mutation order. Reads made
//! on behalf of the runtime itself pass `record_access = false` and emit nothing.

mod storage;

pub use storage::{DirStorage, MemoryStorage, Storage, StorageError, StoredState};

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use thiserror::Error;

use crate::events::{EventBus, EventPayload, UpdatePayload};
use crate::journal::CallLog;
use crate::model::{
    AasId, AssetAdministrationShell, ElementReference, IdShort, ModelError, ResolveError, Submodel, SubmodelElement,
    Value, ValueType,
};

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("duplicate id(s): {}", .0.iter().map(|i| i.as_str()).collect::<Vec<_>>().join(", "))]
    DuplicateId(Vec<AasId>),
    #[error("unknown submodel {0}")]
    UnknownSubmodel(AasId),
    #[error("unknown shell {0}")]
    UnknownShell(AasId),
    #[error("path not found in {submodel}: resolved `{resolved}`, missing `{missing}`")]
    PathNotFound {
        submodel: AasId,
        resolved: String,
        missing: String,
    },
    #[error("type mismatch at {path}: expected {expected}, got {value}")]
    TypeMismatch {
        path: String,
        expected: ValueType,
        value: String,
    },
    #[error("{0} is not a property")]
    NotAProperty(String),
    #[error("{0} is not a collection")]
    NotACollection(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl From<ResolveError> for ManagerError {
    fn from(e: ResolveError) -> Self {
        match e {
            ResolveError::UnknownSubmodel(id) => ManagerError::UnknownSubmodel(id),
            ResolveError::PathNotFound {
                submodel,
                resolved,
                missing,
            } => ManagerError::PathNotFound {
                submodel,
                resolved,
                missing,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmodelSummary {
    pub id: AasId,
    pub id_short: IdShort,
    pub semantic_id: Option<String>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ShellSummary {
    pub id: AasId,
    pub id_short: IdShort,
    pub submodels: Vec<AasId>,
    /// Referenced submodels that are not stored.
    pub dangling: Vec<AasId>,
}

struct Repo {
    shells: BTreeMap<AasId, AssetAdministrationShell>,
    submodels: BTreeMap<AasId, Submodel>,
    storage: Box<dyn Storage>,
}

impl Repo {
    fn submodel(&self, id: &AasId) -> Result<&Submodel, ManagerError> {
        self.submodels
            .get(id)
            .ok_or_else(|| ManagerError::UnknownSubmodel(id.clone()))
    }

    fn shell_summary(&self, shell: &AssetAdministrationShell) -> ShellSummary {
        let submodels: Vec<AasId> = shell.submodel_refs.iter().map(|r| r.submodel_id.clone()).collect();
        let dangling = submodels
            .iter()
            .filter(|id| !self.submodels.contains_key(*id))
            .cloned()
            .collect();
        ShellSummary {
            id: shell.id.clone(),
            id_short: shell.id_short.clone(),
            submodels,
            dangling,
        }
    }
}

pub struct Manager {
    repo: Mutex<Repo>,
    bus: Arc<EventBus>,
    journal: Option<Arc<CallLog>>,
}

impl std::fmt::Debug for Manager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Manager").finish_non_exhaustive()
    }
}

impl Manager {
    /// Opens a repository over `storage`, loading whatever it already holds.
    pub fn open(storage: Box<dyn Storage>, bus: Arc<EventBus>) -> Result<Self, StorageError> {
        let state = storage.load()?;
        Ok(Self {
            repo: Mutex::new(Repo {
                shells: state.shells,
                submodels: state.submodels,
                storage,
            }),
            bus,
            journal: None,
        })
    }

    pub fn in_memory(bus: Arc<EventBus>) -> Self {
        Self::open(Box::new(MemoryStorage::new()), bus).expect("memory storage loads")
    }

    pub fn with_call_log(mut self, log: Arc<CallLog>) -> Self {
        self.journal = Some(log);
        self
    }

    pub fn bus(&self) -> &Arc<EventBus> {
        &self.bus
    }

    fn lock(&self) -> MutexGuard<'_, Repo> {
        self.repo.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn journal(&self, entry: impl FnOnce() -> String) {
        if let Some(log) = &self.journal {
            log.record(entry());
        }
    }

    /// Ids among the given ones that already exist.
    pub fn conflicts<'a>(
        &self,
        shells: impl IntoIterator<Item = &'a AasId>,
        submodels: impl IntoIterator<Item = &'a AasId>,
    ) -> Vec<AasId> {
        let repo = self.lock();
        let mut out: Vec<AasId> = shells
            .into_iter()
            .filter(|id| repo.shells.contains_key(*id))
            .chain(submodels.into_iter().filter(|id| repo.submodels.contains_key(*id)))
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn create_shell(&self, shell: AssetAdministrationShell) -> Result<AasId, ManagerError> {
        shell.validate()?;
        let mut repo = self.lock();
        if repo.shells.contains_key(&shell.id) {
            return Err(ManagerError::DuplicateId(vec![shell.id]));
        }
        repo.storage.put_shell(&shell)?;
        self.journal(|| format!("manager.create_shell {}", shell.id));
        let id = shell.id.clone();
        repo.shells.insert(id.clone(), shell);
        Ok(id)
    }

    pub fn get_shell(&self, id: &AasId) -> Result<AssetAdministrationShell, ManagerError> {
        self.lock()
            .shells
            .get(id)
            .cloned()
            .ok_or_else(|| ManagerError::UnknownShell(id.clone()))
    }

    pub fn shell_status(&self, id: &AasId) -> Result<ShellSummary, ManagerError> {
        let repo = self.lock();
        let shell = repo
            .shells
            .get(id)
            .ok_or_else(|| ManagerError::UnknownShell(id.clone()))?;
        Ok(repo.shell_summary(shell))
    }

    pub fn delete_shell(&self, id: &AasId) -> Result<(), ManagerError> {
        let mut repo = self.lock();
        if !repo.shells.contains_key(id) {
            return Err(ManagerError::UnknownShell(id.clone()));
        }
        repo.storage.delete_shell(id)?;
        repo.shells.remove(id);
        Ok(())
    }

    pub fn list_shells(&self) -> Vec<ShellSummary> {
        let repo = self.lock();
        repo.shells.values().map(|s| repo.shell_summary(s)).collect()
    }

    /// Stores `sm` with version 1 and emits one `Import` event.
    pub fn create_submodel(&self, sm: Submodel) -> Result<AasId, ManagerError> {
        let id = self.create_submodel_silent(sm)?;
        self.announce_import(&id)?;
        Ok(id)
    }

    /// Stores a submodel without emitting its Import event, so a failed
    /// multi-part import can be undone before anyone observes it.
    pub(crate) fn create_submodel_silent(&self, mut sm: Submodel) -> Result<AasId, ManagerError> {
        sm.validate()?;
        sm.version = 1;
        let mut repo = self.lock();
        if repo.submodels.contains_key(&sm.id) {
            return Err(ManagerError::DuplicateId(vec![sm.id]));
        }
        repo.storage.put_submodel(&sm)?;
        self.journal(|| format!("manager.create_submodel {}", sm.id));
        let id = sm.id.clone();
        repo.submodels.insert(id.clone(), sm);
        Ok(id)
    }

    /// Emits the Import event for a stored submodel.
    pub(crate) fn announce_import(&self, id: &AasId) -> Result<(), ManagerError> {
        let repo = self.lock();
        let sm = repo.submodel(id)?;
        self.bus.emit(
            Some(ElementReference::submodel(id.clone())),
            EventPayload::Import {
                submodel: Box::new(sm.clone()),
            },
        );
        Ok(())
    }

    pub fn get_submodel(&self, id: &AasId, record_access: bool) -> Result<Submodel, ManagerError> {
        let repo = self.lock();
        let sm = repo.submodel(id)?.clone();
        if record_access {
            self.bus
                .emit(Some(ElementReference::submodel(id.clone())), EventPayload::Access);
        }
        Ok(sm)
    }

    /// Reads one element; an empty path is rejected, use [`get_submodel`](Self::get_submodel).
    pub fn get_element(&self, reference: &ElementReference, record_access: bool) -> Result<SubmodelElement, ManagerError> {
        let repo = self.lock();
        let sm = repo.submodel(&reference.submodel_id)?;
        let element = sm
            .find(&reference.element_path)
            .map_err(|d| ResolveError::path_not_found(&sm.id, &reference.element_path, d))?
            .clone();
        if record_access {
            self.bus.emit(Some(reference.clone()), EventPayload::Access);
        }
        Ok(element)
    }

    /// Current value of a property, without recording an access.
    pub fn read_value(&self, reference: &ElementReference) -> Result<Value, ManagerError> {
        match self.get_element(reference, false)? {
            SubmodelElement::Property(p) => Ok(p.value),
            _ => Err(ManagerError::NotAProperty(reference.canonical_path())),
        }
    }

    /// Replaces a property value and returns the submodel version afterwards.
    ///
    /// Writing the value a property already holds is a no-op: no version bump, no event.
    pub fn update_element(&self, reference: &ElementReference, new_value: Value) -> Result<u64, ManagerError> {
        let mut repo = self.lock();
        let current = repo.submodel(&reference.submodel_id)?;
        let element = current
            .find(&reference.element_path)
            .map_err(|d| ResolveError::path_not_found(&current.id, &reference.element_path, d))?;
        let SubmodelElement::Property(prop) = element else {
            return Err(ManagerError::NotAProperty(reference.canonical_path()));
        };
        let expected = prop.value_type();
        let new_value = Value::from_json(expected, &new_value.to_json()).map_err(|_| ManagerError::TypeMismatch {
            path: reference.canonical_path(),
            expected,
            value: new_value.lexical(),
        })?;
        if prop.value == new_value {
            return Ok(current.version);
        }
        let old = prop.value.clone();
        let mut updated = current.clone();
        if let Ok(SubmodelElement::Property(p)) = updated.find_mut(&reference.element_path) {
            p.value = new_value.clone();
        }
        updated.version += 1;
        repo.storage.put_submodel(&updated)?;
        let version = updated.version;
        repo.submodels.insert(updated.id.clone(), updated);
        self.bus.emit(
            Some(reference.clone()),
            EventPayload::Update(UpdatePayload::Value { old, new: new_value }),
        );
        Ok(version)
    }

    /// Appends `element` to the collection (or submodel root) addressed by `parent`.
    pub fn add_element(&self, parent: &ElementReference, element: SubmodelElement) -> Result<u64, ManagerError> {
        let mut repo = self.lock();
        let mut updated = repo.submodel(&parent.submodel_id)?.clone();
        let children = updated.children_mut(&parent.element_path).map_err(|d| {
            if d == parent.element_path.len() && !parent.element_path.is_empty() {
                ManagerError::NotACollection(parent.canonical_path())
            } else {
                ResolveError::path_not_found(&parent.submodel_id, &parent.element_path, d).into()
            }
        })?;
        children.push(element.clone());
        updated.validate()?;
        updated.version += 1;
        repo.storage.put_submodel(&updated)?;
        let version = updated.version;
        repo.submodels.insert(updated.id.clone(), updated);
        self.bus.emit(
            Some(parent.child(element.id_short().clone())),
            EventPayload::Update(UpdatePayload::ElementAdded { element }),
        );
        Ok(version)
    }

    pub fn remove_element(&self, reference: &ElementReference) -> Result<u64, ManagerError> {
        let Some((last, parent_path)) = reference.element_path.split_last() else {
            return Err(ManagerError::NotAProperty(reference.canonical_path()));
        };
        let mut repo = self.lock();
        let mut updated = repo.submodel(&reference.submodel_id)?.clone();
        let siblings = updated
            .children_mut(parent_path)
            .map_err(|d| ResolveError::path_not_found(&reference.submodel_id, &reference.element_path, d))?;
        let pos = siblings
            .iter()
            .position(|e| e.id_short() == last)
            .ok_or_else(|| {
                ResolveError::path_not_found(&reference.submodel_id, &reference.element_path, parent_path.len())
            })?;
        let element = siblings.remove(pos);
        updated.version += 1;
        repo.storage.put_submodel(&updated)?;
        let version = updated.version;
        repo.submodels.insert(updated.id.clone(), updated);
        self.bus.emit(
            Some(reference.clone()),
            EventPayload::Update(UpdatePayload::ElementRemoved { element }),
        );
        Ok(version)
    }

    /// Removes a submodel; shells referencing it become dangling.
    pub fn delete_submodel(&self, id: &AasId) -> Result<(), ManagerError> {
        let mut repo = self.lock();
        repo.submodel(id)?;
        repo.storage.delete_submodel(id)?;
        repo.submodels.remove(id);
        self.bus.emit(
            Some(ElementReference::submodel(id.clone())),
            EventPayload::Update(UpdatePayload::SubmodelDeleted),
        );
        Ok(())
    }

    pub fn list_submodels(&self) -> Vec<SubmodelSummary> {
        self.lock()
            .submodels
            .values()
            .map(|sm| SubmodelSummary {
                id: sm.id.clone(),
                id_short: sm.id_short.clone(),
                semantic_id: sm.semantic_id.clone(),
                version: sm.version,
            })
            .collect()
    }

    /// Structural copy of the stored content.
    pub fn snapshot(&self) -> StoredState {
        let repo = self.lock();
        StoredState {
            shells: repo.shells.clone(),
            submodels: repo.submodels.clone(),
        }
    }

    /// Undoes creations made by a failed import. Emits no events.
    pub(crate) fn rollback_created(&self, shells: &[AasId], submodels: &[AasId]) {
        let mut repo = self.lock();
        for id in shells {
            if repo.shells.remove(id).is_some() {
                if let Err(e) = repo.storage.delete_shell(id) {
                    tracing::error!("rollback of shell {id} failed: {e}");
                }
            }
        }
        for id in submodels {
            if repo.submodels.remove(id).is_some() {
                if let Err(e) = repo.storage.delete_submodel(id) {
                    tracing::error!("rollback of submodel {id} failed: {e}");
                }
            }
        }
    }
}

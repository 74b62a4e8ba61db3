//! The runtime facade: one object that owns the manager, the context store and
//! the orchestrator, and keeps them consistent across imports and edits.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::context_store::{ContextStore, StoreError};
use crate::engine::{ContainerEngine, ServiceApi, SimulatedEngine};
use crate::events::{EventBus, EventPayload, LifecycleEvent};
use crate::instance::{InstanceId, ServiceInstance, TerminationReason, Transition};
use crate::journal::CallLog;
use crate::manager::{DirStorage, Manager, ManagerError, MemoryStorage, Storage, StorageError};
use crate::model::{AasId, ElementReference, IdShort, Submodel, SubmodelElement, Value};
use crate::orchestrator::{Orchestrator, OrchestratorConfig, OrchestratorError, RegisteredSpec};
use crate::package::{read_package, validate_package, AasxPackage, Finding, PackageError, ValidationReport};
use crate::service_execution::{parse_spec, ContextRef, ExecutionTrigger, MalformedSpec, ServiceExecutionSpec, SpecBinding};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("package failed validation with {} error(s)", .0.errors().count())]
    Invalid(ValidationReport),
    #[error("already registered: {}", .0.join(", "))]
    Conflict(Vec<String>),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    MalformedSpec(#[from] MalformedSpec),
    #[error("unknown service {0}")]
    UnknownService(IdShort),
    #[error("service {0} has no onDemand trigger")]
    NotDemandable(IdShort),
    #[error("injected fault at {0:?}")]
    Injected(ImportStep),
}

impl RuntimeError {
    /// The HTTP status this error maps to.
    pub fn status(&self) -> u16 {
        match self {
            RuntimeError::Package(_) | RuntimeError::Invalid(_) | RuntimeError::MalformedSpec(_) => 400,
            RuntimeError::Conflict(_) | RuntimeError::NotDemandable(_) => 409,
            RuntimeError::UnknownService(_) => 404,
            RuntimeError::Manager(e) => match e {
                ManagerError::UnknownSubmodel(_) | ManagerError::UnknownShell(_) | ManagerError::PathNotFound { .. } => 404,
                ManagerError::DuplicateId(_) => 409,
                ManagerError::TypeMismatch { .. } => 422,
                ManagerError::NotAProperty(_)
                | ManagerError::NotACollection(_)
                | ManagerError::Invalid(_) => 400,
                ManagerError::Storage(_) => 500,
            },
            RuntimeError::Store(StoreError::UnknownContext { .. }) => 404,
            RuntimeError::Store(StoreError::Invalid(_)) => 400,
            RuntimeError::Store(_) => 500,
            RuntimeError::Orchestrator(OrchestratorError::UnknownInstance(_)) => 404,
            RuntimeError::Orchestrator(_) => 409,
            RuntimeError::Injected(_) => 500,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::Package(e) => e.code(),
            RuntimeError::Invalid(_) => "ValidationFailed",
            RuntimeError::Conflict(_) => "Conflict",
            RuntimeError::Manager(e) => match e {
                ManagerError::DuplicateId(_) => "DuplicateId",
                ManagerError::UnknownSubmodel(_) => "UnknownSubmodel",
                ManagerError::UnknownShell(_) => "UnknownShell",
                ManagerError::PathNotFound { .. } => "PathNotFound",
                ManagerError::TypeMismatch { .. } => "TypeMismatch",
                ManagerError::NotAProperty(_) => "NotAProperty",
                ManagerError::NotACollection(_) => "NotACollection",
                ManagerError::Invalid(_) => "InvalidModel",
                ManagerError::Storage(_) => "StorageError",
            },
            RuntimeError::Store(StoreError::UnknownContext { .. }) => "UnknownContext",
            RuntimeError::Store(_) => "ContextStoreError",
            RuntimeError::Orchestrator(OrchestratorError::UnknownInstance(_)) => "UnknownInstance",
            RuntimeError::Orchestrator(OrchestratorError::AlreadyTerminated(_)) => "AlreadyTerminated",
            RuntimeError::Orchestrator(OrchestratorError::DuplicateService(_)) => "DuplicateService",
            RuntimeError::MalformedSpec(_) => "MalformedSpec",
            RuntimeError::UnknownService(_) => "UnknownService",
            RuntimeError::NotDemandable(_) => "NotDemandable",
            RuntimeError::Injected(_) => "InjectedFault",
        }
    }
}

impl From<StorageError> for RuntimeError {
    fn from(e: StorageError) -> Self {
        RuntimeError::Manager(ManagerError::Storage(e))
    }
}

/// Import phases, in execution order. Used to inject failures in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ImportStep {
    Parse,
    Validate,
    RegisterSubmodel,
    RegisterShell,
    StoreContext,
    HandOff,
}

impl ImportStep {
    pub const ALL: [ImportStep; 6] = [
        ImportStep::Parse,
        ImportStep::Validate,
        ImportStep::RegisterSubmodel,
        ImportStep::RegisterShell,
        ImportStep::StoreContext,
        ImportStep::HandOff,
    ];
}

/// Fail the `index`-th occurrence (zero-based) of `step` during the next import.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportFault {
    pub step: ImportStep,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextReceipt {
    pub service_id: IdShort,
    pub content_hash: String,
    pub newly_stored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ImportReport {
    pub shells: Vec<AasId>,
    pub submodels: Vec<AasId>,
    pub contexts: Vec<ContextReceipt>,
    pub services: Vec<IdShort>,
    /// Instances started by onInitialize triggers during the import.
    pub activations: Vec<Activation>,
    pub findings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Activation {
    pub service_id: IdShort,
    pub instance_id: InstanceId,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DemandReceipt {
    pub event_seq: u64,
    /// Absent when the re-activation policy queued or ignored the demand.
    pub instance: Option<ServiceInstance>,
}

#[derive(Debug, Clone, Default)]
pub struct RuntimeOptions {
    pub orchestrator: OrchestratorConfig,
    /// Keep every emitted event in memory. Meant for tests and transcripts.
    pub record_events: bool,
}

/// What a service sees when it talks back to the runtime in-process.
#[derive(Debug, Clone)]
pub struct ManagerApi {
    manager: Arc<Manager>,
}

impl ManagerApi {
    pub fn new(manager: Arc<Manager>) -> Self {
        Self { manager }
    }
}

impl ServiceApi for ManagerApi {
    fn read(&self, canonical_path: &str) -> Result<Value, String> {
        let r = ElementReference::from_canonical_path(canonical_path).map_err(|e| e.to_string())?;
        self.manager.read_value(&r).map_err(|e| e.to_string())
    }

    fn write(&self, canonical_path: &str, value: Value) -> Result<(), String> {
        let r = ElementReference::from_canonical_path(canonical_path).map_err(|e| e.to_string())?;
        self.manager.update_element(&r, value).map(|_| ()).map_err(|e| e.to_string())
    }
}

pub struct Runtime {
    manager: Arc<Manager>,
    store: Arc<ContextStore>,
    orchestrator: Mutex<Orchestrator>,
    bus: Arc<EventBus>,
    clock: Arc<dyn Clock>,
    log: Arc<CallLog>,
    import_lock: Mutex<()>,
    fault: Mutex<Option<ImportFault>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").finish_non_exhaustive()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Runtime {
    /// Assembles a runtime and re-registers every spec already in storage.
    pub fn new(
        storage: Box<dyn Storage>,
        store: ContextStore,
        engine: Arc<dyn ContainerEngine>,
        clock: Arc<dyn Clock>,
        options: RuntimeOptions,
    ) -> Result<Self, RuntimeError> {
        let log = Arc::new(CallLog::new());
        let bus = Arc::new(if options.record_events {
            EventBus::with_history()
        } else {
            EventBus::new()
        });
        let manager = Arc::new(Manager::open(storage, bus.clone())?.with_call_log(log.clone()));
        let store = Arc::new(store.with_call_log(log.clone()));
        let orchestrator = Orchestrator::new(engine, store.clone(), clock.clone(), bus.clone(), options.orchestrator)
            .with_call_log(log.clone());
        let rt = Self {
            manager,
            store,
            orchestrator: Mutex::new(orchestrator),
            bus,
            clock,
            log,
            import_lock: Mutex::new(()),
            fault: Mutex::new(None),
        };
        rt.recover()?;
        Ok(rt)
    }

    /// A runtime persisting to `data_dir/repository` and `data_dir/contexts`.
    pub fn open_dir(
        data_dir: &Path,
        engine: Arc<dyn ContainerEngine>,
        clock: Arc<dyn Clock>,
        options: RuntimeOptions,
    ) -> Result<Self, RuntimeError> {
        let storage = DirStorage::open(data_dir.join("repository"))?;
        let store = ContextStore::open(data_dir.join("contexts"), clock.clone())?;
        Self::new(Box::new(storage), store, engine, clock, options)
    }

    /// An in-memory runtime on the simulated engine. The engine's services call
    /// back into this runtime's manager.
    pub fn simulated(engine: SimulatedEngine, clock: Arc<dyn Clock>) -> Self {
        let rt = Self::new(
            Box::new(MemoryStorage::new()),
            ContextStore::in_memory(clock.clone()),
            Arc::new(engine.clone()),
            clock,
            RuntimeOptions {
                record_events: true,
                ..RuntimeOptions::default()
            },
        )
        .expect("in-memory runtime");
        engine.attach_api(Arc::new(rt.service_api()));
        rt
    }

    /// Specs found in storage on startup are registered again. No onInitialize
    /// activation happens for them; they were initialized when first imported.
    fn recover(&self) -> Result<(), RuntimeError> {
        let mut orch = lock(&self.orchestrator);
        for summary in self.manager.list_submodels() {
            let sm = self.manager.get_submodel(&summary.id, false)?;
            match parse_spec(&sm) {
                Ok(Some(spec)) => {
                    let pinned = self.pin_for(&spec);
                    let binding = self.bind(spec, &sm.id);
                    if let Err(e) = orch.register_spec(binding, pinned) {
                        tracing::warn!("skipping stored spec in {}: {e}", sm.id);
                    }
                }
                Ok(None) => {}
                Err(e) => tracing::warn!("stored submodel {} carries a malformed spec: {e}", sm.id),
            }
        }
        Ok(())
    }

    fn pin_for(&self, spec: &ServiceExecutionSpec) -> Option<String> {
        match &spec.context {
            ContextRef::Package {
                service_ref,
                content_hash,
            } => content_hash
                .clone()
                .or_else(|| self.store.list_versions(service_ref).first().map(|m| m.content_hash.clone())),
            ContextRef::Image { .. } => None,
        }
    }

    fn bind(&self, spec: ServiceExecutionSpec, source: &AasId) -> SpecBinding {
        let mut binding = SpecBinding::new(spec, source.clone());
        binding.shell = self
            .manager
            .list_shells()
            .into_iter()
            .find(|s| s.submodels.contains(source))
            .map(|s| s.id);
        binding
    }

    pub fn service_api(&self) -> ManagerApi {
        ManagerApi::new(self.manager.clone())
    }

    pub fn manager(&self) -> &Arc<Manager> {
        &self.manager
    }

    pub fn context_store(&self) -> &Arc<ContextStore> {
        &self.store
    }

    pub fn call_log(&self) -> &Arc<CallLog> {
        &self.log
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Events emitted so far, when recording is enabled.
    pub fn events(&self) -> Vec<LifecycleEvent> {
        self.bus.history()
    }

    fn orch(&self) -> MutexGuard<'_, Orchestrator> {
        lock(&self.orchestrator)
    }

    /// Processes every queued event.
    pub fn pump(&self) -> Vec<Transition> {
        self.orch().drain()
    }

    pub fn inject_import_fault(&self, fault: Option<ImportFault>) {
        *lock(&self.fault) = fault;
    }

    fn check_fault(&self, step: ImportStep, index: usize) -> Result<(), RuntimeError> {
        let mut fault = lock(&self.fault);
        if *fault == Some(ImportFault { step, index }) {
            *fault = None;
            return Err(RuntimeError::Injected(step));
        }
        Ok(())
    }

    /// Imports an AASX archive.
    pub fn import_bytes(&self, bytes: &[u8]) -> Result<ImportReport, RuntimeError> {
        self.check_fault(ImportStep::Parse, 0)?;
        let pkg = read_package(bytes)?;
        self.import_package(pkg)
    }

    /// Imports a parsed package. Either everything is registered and announced,
    /// or nothing is and no event is emitted.
    pub fn import_package(&self, pkg: AasxPackage) -> Result<ImportReport, RuntimeError> {
        self.check_fault(ImportStep::Validate, 0)?;
        let report = validate_package(&pkg);
        if report.has_errors() {
            return Err(RuntimeError::Invalid(report));
        }
        let _guard = lock(&self.import_lock);

        let shell_ids: Vec<AasId> = pkg.shells.iter().map(|(_, s)| s.id.clone()).collect();
        let submodel_ids: Vec<AasId> = pkg.submodels().map(|s| s.id.clone()).collect();
        let mut specs = Vec::new();
        for sm in pkg.submodels() {
            if let Some(spec) = parse_spec(sm)? {
                specs.push((spec, sm.id.clone()));
            }
        }
        let mut conflicts: Vec<String> = self
            .manager
            .conflicts(&shell_ids, &submodel_ids)
            .into_iter()
            .map(|id| id.to_string())
            .collect();
        {
            let orch = self.orch();
            conflicts.extend(
                specs
                    .iter()
                    .filter(|(spec, _)| orch.spec(&spec.service_id).is_some())
                    .map(|(spec, _)| format!("service {}", spec.service_id)),
            );
        }
        if !conflicts.is_empty() {
            return Err(RuntimeError::Conflict(conflicts));
        }

        let mut done = Applied::default();
        match self.apply(&pkg, specs, &mut done) {
            Ok(contexts) => {
                for id in &done.submodels {
                    self.manager.announce_import(id)?;
                }
                let activations = self
                    .pump()
                    .into_iter()
                    .filter(|t| t.from.is_none())
                    .map(|t| Activation {
                        service_id: t.service_id,
                        instance_id: t.instance_id,
                    })
                    .collect();
                Ok(ImportReport {
                    shells: done.shells,
                    submodels: done.submodels,
                    contexts,
                    services: done.services,
                    activations,
                    findings: report.findings,
                })
            }
            Err(e) => {
                self.undo(&done);
                Err(e)
            }
        }
    }

    fn apply(
        &self,
        pkg: &AasxPackage,
        specs: Vec<(ServiceExecutionSpec, AasId)>,
        done: &mut Applied,
    ) -> Result<Vec<ContextReceipt>, RuntimeError> {
        for (i, sm) in pkg.submodels().enumerate() {
            self.check_fault(ImportStep::RegisterSubmodel, i)?;
            done.submodels.push(self.manager.create_submodel_silent(sm.clone())?);
        }
        for (i, (_, shell)) in pkg.shells.iter().enumerate() {
            self.check_fault(ImportStep::RegisterShell, i)?;
            done.shells.push(self.manager.create_shell(shell.clone())?);
        }
        let mut receipts = Vec::new();
        for (i, ctx) in pkg.service_contexts.iter().enumerate() {
            self.check_fault(ImportStep::StoreContext, i)?;
            let receipt = self.store.store_context(ctx)?;
            if receipt.newly_stored {
                done.contexts.push((ctx.service_id.clone(), ctx.content_hash.clone()));
            }
            receipts.push(ContextReceipt {
                service_id: ctx.service_id.clone(),
                content_hash: receipt.content_hash,
                newly_stored: receipt.newly_stored,
            });
        }
        let mut orch = self.orch();
        for (i, (spec, source)) in specs.into_iter().enumerate() {
            self.check_fault(ImportStep::HandOff, i)?;
            let pinned = match &spec.context {
                ContextRef::Package { service_ref, .. } => pkg.context(service_ref).map(|c| c.content_hash.clone()),
                ContextRef::Image { .. } => None,
            };
            let service_id = spec.service_id.clone();
            orch.register_spec(self.bind(spec, &source), pinned)?;
            done.services.push(service_id);
        }
        Ok(receipts)
    }

    fn undo(&self, done: &Applied) {
        let mut orch = self.orch();
        for service_id in &done.services {
            orch.unregister_spec(service_id);
        }
        drop(orch);
        for (service_id, hash) in &done.contexts {
            if let Err(e) = self.store.discard(service_id, hash) {
                tracing::error!("could not discard context {service_id}@{hash}: {e}");
            }
        }
        self.manager.rollback_created(&done.shells, &done.submodels);
    }

    /// Adds a submodel. A service execution submodel also registers its service.
    pub fn create_submodel(&self, sm: Submodel) -> Result<AasId, RuntimeError> {
        let _guard = lock(&self.import_lock);
        let spec = parse_spec(&sm)?;
        if let Some(spec) = &spec {
            if self.orch().spec(&spec.service_id).is_some() {
                return Err(RuntimeError::Conflict(vec![format!("service {}", spec.service_id)]));
            }
        }
        let id = self.manager.create_submodel_silent(sm)?;
        if let Some(spec) = spec {
            let pinned = self.pin_for(&spec);
            let binding = self.bind(spec, &id);
            self.orch().register_spec(binding, pinned)?;
        }
        self.manager.announce_import(&id)?;
        drop(_guard);
        self.pump();
        Ok(id)
    }

    pub fn get_submodel(&self, id: &AasId, external: bool) -> Result<Submodel, RuntimeError> {
        let sm = self.manager.get_submodel(id, external)?;
        self.pump();
        Ok(sm)
    }

    pub fn get_element(&self, r: &ElementReference, external: bool) -> Result<SubmodelElement, RuntimeError> {
        let el = self.manager.get_element(r, external)?;
        self.pump();
        Ok(el)
    }

    pub fn update_element(&self, r: &ElementReference, value: Value) -> Result<u64, RuntimeError> {
        let version = self.manager.update_element(r, value)?;
        self.pump();
        Ok(version)
    }

    pub fn add_element(&self, parent: &ElementReference, element: SubmodelElement) -> Result<u64, RuntimeError> {
        let version = self.manager.add_element(parent, element)?;
        self.pump();
        Ok(version)
    }

    pub fn remove_element(&self, r: &ElementReference) -> Result<u64, RuntimeError> {
        let version = self.manager.remove_element(r)?;
        self.pump();
        Ok(version)
    }

    /// Deletes a submodel; instances of services it declared are terminated.
    pub fn delete_submodel(&self, id: &AasId) -> Result<(), RuntimeError> {
        self.manager.delete_submodel(id)?;
        self.pump();
        Ok(())
    }

    /// Requests an on-demand activation.
    pub fn demand(&self, service_id: &IdShort) -> Result<DemandReceipt, RuntimeError> {
        {
            let orch = self.orch();
            let spec = orch
                .spec(service_id)
                .ok_or_else(|| RuntimeError::UnknownService(service_id.clone()))?;
            if !spec.binding.spec.has_trigger(ExecutionTrigger::OnDemand) {
                return Err(RuntimeError::NotDemandable(service_id.clone()));
            }
        }
        let seq = self.bus.emit(
            None,
            EventPayload::Demand {
                service_id: service_id.clone(),
            },
        );
        let mut orch = self.orch();
        orch.drain();
        let instance = orch.instances_caused_by(seq).into_iter().next().cloned();
        Ok(DemandReceipt { event_seq: seq, instance })
    }

    pub fn instances(&self) -> Vec<ServiceInstance> {
        self.orch().instances().to_vec()
    }

    pub fn instance(&self, id: &InstanceId) -> Option<ServiceInstance> {
        self.orch().instance(id).cloned()
    }

    pub fn stop_instance(&self, id: &InstanceId) -> Result<ServiceInstance, RuntimeError> {
        let mut orch = self.orch();
        orch.terminate(id, TerminationReason::OperatorStop)?;
        orch.drain();
        Ok(orch.instance(id).cloned().expect("terminated instance is kept"))
    }

    /// Runs one supervision pass at the current clock reading.
    pub fn supervision_tick(&self) -> Vec<Transition> {
        let now = self.clock.now();
        self.orch().supervision_tick(now)
    }

    /// Stops every running instance.
    pub fn shutdown(&self) -> Vec<Transition> {
        self.orch().shutdown()
    }

    pub fn specs(&self) -> Vec<RegisteredSpec> {
        self.orch().specs().to_vec()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.orch().transitions().to_vec()
    }

    /// Removes stored context versions no registered service pins.
    pub fn gc_contexts(&self) -> Result<Vec<crate::context_store::StoredContext>, RuntimeError> {
        let keep: BTreeSet<(IdShort, String)> = self
            .orch()
            .specs()
            .iter()
            .filter_map(|s| match &s.binding.spec.context {
                ContextRef::Package { service_ref, .. } => {
                    s.pinned_hash.clone().map(|h| (service_ref.clone(), h))
                }
                ContextRef::Image { .. } => None,
            })
            .collect();
        Ok(self.store.gc(&keep)?)
    }
}

#[derive(Debug, Default)]
struct Applied {
    submodels: Vec<AasId>,
    shells: Vec<AasId>,
    contexts: Vec<(IdShort, String)>,
    services: Vec<IdShort>,
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::clock::ManualClock;
    use crate::engine::BehaviorOutcome;
    use crate::instance::InstanceState;
    use crate::model::AssetAdministrationShell;
    use crate::package::ServiceContextEntry;

    fn id(s: &str) -> AasId {
        AasId::new(s).unwrap()
    }

    fn package(triggers: &[ExecutionTrigger]) -> AasxPackage {
        let ctx = ServiceContextEntry::new(IdShort::new("svc").unwrap(), "1.0.0", b"FROM alpine\n".to_vec(), BTreeMap::new());
        let data = Submodel::new(id("urn:x:data"), IdShort::new("Data").unwrap())
            .with_element(SubmodelElement::property("In", Value::Integer(1)).unwrap())
            .with_element(SubmodelElement::property("Out", Value::Integer(0)).unwrap());
        let spec = ServiceExecutionSpec::new(
            IdShort::new("svc").unwrap(),
            ContextRef::Package {
                service_ref: IdShort::new("svc").unwrap(),
                content_hash: Some(ctx.content_hash.clone()),
            },
            triggers.iter().copied(),
        )
        .with_input("IN", ElementReference::from_dotted(id("urn:x:data"), "In").unwrap())
        .with_output("OUT", ElementReference::from_dotted(id("urn:x:data"), "Out").unwrap())
        .to_submodel(id("urn:x:spec"), IdShort::new("Spec").unwrap());
        let shell = AssetAdministrationShell::new(id("urn:x:aas"), IdShort::new("Aas").unwrap())
            .with_submodel(id("urn:x:data"))
            .with_submodel(id("urn:x:spec"));
        let mut pkg = AasxPackage::new();
        pkg.add_shell(shell).add_submodel(data).add_submodel(spec).add_service(ctx);
        pkg
    }

    fn runtime() -> (Runtime, SimulatedEngine, ManualClock) {
        let engine = SimulatedEngine::new();
        let clock = ManualClock::default();
        let rt = Runtime::simulated(engine.clone(), Arc::new(clock.clone()));
        (rt, engine, clock)
    }

    fn copy_behavior(engine: &SimulatedEngine, pkg: &AasxPackage) {
        engine.register_behavior(pkg.service_contexts[0].content_hash.clone(), |ctx| {
            let v = ctx.api.read(&ctx.env["AAS_INPUT_IN"]).unwrap();
            ctx.api.write(&ctx.env["AAS_OUTPUT_OUT"], v).unwrap();
            BehaviorOutcome::exited(0)
        });
    }

    #[test]
    fn import_order_and_initialize() {
        let (rt, engine, _) = runtime();
        let pkg = package(&[ExecutionTrigger::OnInitialize]);
        copy_behavior(&engine, &pkg);
        let report = rt.import_package(pkg).unwrap();
        assert_eq!(report.activations.len(), 1);
        let log = rt.call_log().entries();
        let kinds: Vec<&str> = log.iter().map(|e| e.split(' ').next().unwrap()).collect();
        assert_eq!(
            kinds,
            [
                "manager.create_submodel",
                "manager.create_submodel",
                "manager.create_shell",
                "store.store_context",
                "orchestrator.register_spec"
            ]
        );
        let out = rt
            .manager()
            .read_value(&ElementReference::from_dotted(id("urn:x:data"), "Out").unwrap())
            .unwrap();
        assert_eq!(out, Value::Integer(1));
    }

    #[test]
    fn update_flows_through_service() {
        let (rt, engine, _) = runtime();
        let pkg = package(&[ExecutionTrigger::OnUpdate]);
        copy_behavior(&engine, &pkg);
        rt.import_package(pkg).unwrap();
        assert!(rt.instances().is_empty());
        rt.update_element(&ElementReference::from_dotted(id("urn:x:data"), "In").unwrap(), Value::Integer(7))
            .unwrap();
        assert_eq!(rt.instances().len(), 1);
        rt.supervision_tick();
        assert_eq!(rt.instances()[0].state, InstanceState::Terminated(TerminationReason::Completed(0)));
        let out = rt
            .manager()
            .read_value(&ElementReference::from_dotted(id("urn:x:data"), "Out").unwrap())
            .unwrap();
        assert_eq!(out, Value::Integer(7));
    }

    #[test]
    fn reimport_conflicts() {
        let (rt, _, _) = runtime();
        rt.import_package(package(&[ExecutionTrigger::OnDemand])).unwrap();
        let err = rt.import_package(package(&[ExecutionTrigger::OnDemand])).unwrap_err();
        assert_eq!(err.status(), 409);
    }

    #[test]
    fn failed_import_leaves_nothing() {
        for step in ImportStep::ALL {
            let (rt, _, _) = runtime();
            let before = rt.manager().snapshot();
            rt.inject_import_fault(Some(ImportFault { step, index: 0 }));
            let bytes = crate::package::write_package(&package(&[ExecutionTrigger::OnInitialize])).unwrap();
            assert!(rt.import_bytes(&bytes).is_err(), "{step:?}");
            assert_eq!(rt.manager().snapshot(), before);
            assert!(rt.context_store().list_all().is_empty());
            assert!(rt.specs().is_empty());
            assert!(rt.events().is_empty());
        }
    }

    #[test]
    fn demand_rules() {
        let (rt, engine, _) = runtime();
        let pkg = package(&[ExecutionTrigger::OnUpdate]);
        copy_behavior(&engine, &pkg);
        rt.import_package(pkg).unwrap();
        let svc = IdShort::new("svc").unwrap();
        assert_eq!(rt.demand(&svc).unwrap_err().status(), 409);
        assert_eq!(rt.demand(&IdShort::new("nope").unwrap()).unwrap_err().status(), 404);
    }

    #[test]
    fn deleting_the_spec_submodel_stops_the_service() {
        let (rt, engine, _) = runtime();
        let pkg = package(&[ExecutionTrigger::OnDemand]);
        engine.register_behavior(pkg.service_contexts[0].content_hash.clone(), |_| BehaviorOutcome::running(vec![]));
        rt.import_package(pkg).unwrap();
        let receipt = rt.demand(&IdShort::new("svc").unwrap()).unwrap();
        assert!(receipt.instance.unwrap().is_running());
        rt.delete_submodel(&id("urn:x:spec")).unwrap();
        assert_eq!(rt.instances()[0].state, InstanceState::Terminated(TerminationReason::SourceDeleted));
        assert!(rt.specs().is_empty());
    }
}

//! The execution engine: consumes lifecycle events in sequence order, applies
//! trigger evaluation and drives builds, runs and terminations.
//!
//! Engine calls are made synchronously from the event loop, so after
//! [`Orchestrator::dispatch`] returns no instance is left in `Registered` or
//! `Building`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::context_store::ContextStore;
use crate::engine::{image_tag, ContainerEngine, ContainerState, HealthStatus};
use crate::events::{EventBus, EventPayload, LifecycleEvent, UpdatePayload};
use crate::instance::{InstanceId, InstanceState, ServiceInstance, TerminationReason, Transition};
use crate::journal::CallLog;
use crate::model::{AasId, IdShort};
use crate::service_execution::{
    evaluate_execution_triggers, evaluate_termination_triggers, ContextRef, ReactivationPolicy, ServiceAction,
    SpecBinding,
};

pub const DEFAULT_STOP_GRACE: Duration = Duration::from_secs(5);

/// Events processed per drain before the loop gives up; guards against services
/// whose outputs feed back into their own inputs.
pub const MAX_EVENTS_PER_DRAIN: usize = 100_000;

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// Value of `AAS_API_BASE` handed to containers.
    pub api_base: String,
    pub stop_grace: Duration,
    /// Operator-supplied variables for every container, e.g. `AAS_API_TOKEN`.
    /// They override a spec's `env_extra`; the `AAS_*` contract variables override both.
    pub runtime_env: BTreeMap<String, String>,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            api_base: "http://127.0.0.1:8080".into(),
            stop_grace: DEFAULT_STOP_GRACE,
            runtime_env: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestratorError {
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} is already terminated")]
    AlreadyTerminated(InstanceId),
    #[error("service {0} is already registered")]
    DuplicateService(IdShort),
}

/// A registered spec with the context hash pinned when it was handed over.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RegisteredSpec {
    #[serde(flatten)]
    pub binding: SpecBinding,
    pub pinned_hash: Option<String>,
}

pub struct Orchestrator {
    engine: Arc<dyn ContainerEngine>,
    store: Arc<ContextStore>,
    clock: Arc<dyn Clock>,
    bus: Arc<EventBus>,
    journal: Option<Arc<CallLog>>,
    config: OrchestratorConfig,
    specs: Vec<RegisteredSpec>,
    instances: Vec<ServiceInstance>,
    index: HashMap<InstanceId, usize>,
    transitions: Vec<Transition>,
    /// content hash or `image:<name>` -> image id
    images: HashMap<String, String>,
    /// Pending activation per service under the queue-one policy.
    queued: BTreeMap<IdShort, LifecycleEvent>,
    next_instance: u64,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("specs", &self.specs.len())
            .field("instances", &self.instances.len())
            .finish_non_exhaustive()
    }
}

impl Orchestrator {
    pub fn new(
        engine: Arc<dyn ContainerEngine>,
        store: Arc<ContextStore>,
        clock: Arc<dyn Clock>,
        bus: Arc<EventBus>,
        config: OrchestratorConfig,
    ) -> Self {
        Self {
            engine,
            store,
            clock,
            bus,
            journal: None,
            config,
            specs: Vec::new(),
            instances: Vec::new(),
            index: HashMap::new(),
            transitions: Vec::new(),
            images: HashMap::new(),
            queued: BTreeMap::new(),
            next_instance: 1,
        }
    }

    pub fn with_call_log(mut self, log: Arc<CallLog>) -> Self {
        self.journal = Some(log);
        self
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    /// Adds a spec. Registration order is evaluation order.
    pub fn register_spec(&mut self, binding: SpecBinding, pinned_hash: Option<String>) -> Result<(), OrchestratorError> {
        if self.spec(&binding.spec.service_id).is_some() {
            return Err(OrchestratorError::DuplicateService(binding.spec.service_id));
        }
        if let Some(log) = &self.journal {
            log.record(format!("orchestrator.register_spec {}", binding.spec.service_id));
        }
        self.specs.push(RegisteredSpec { binding, pinned_hash });
        Ok(())
    }

    /// Removes the spec for `service_id`, if any. Running instances are left alone.
    pub fn unregister_spec(&mut self, service_id: &IdShort) -> Option<RegisteredSpec> {
        let pos = self.specs.iter().position(|s| &s.binding.spec.service_id == service_id)?;
        self.queued.remove(service_id);
        Some(self.specs.remove(pos))
    }

    pub fn spec(&self, service_id: &IdShort) -> Option<&RegisteredSpec> {
        self.specs.iter().find(|s| &s.binding.spec.service_id == service_id)
    }

    pub fn specs(&self) -> &[RegisteredSpec] {
        &self.specs
    }

    pub fn instances(&self) -> &[ServiceInstance] {
        &self.instances
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&ServiceInstance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    /// Every transition since creation, in order.
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// True when nothing is queued on the bus or pending under queue-one.
    pub fn is_quiescent(&self) -> bool {
        self.bus.pending() == 0 && self.queued.is_empty()
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn transition(&mut self, idx: usize, to: InstanceState, seq: u64) -> Transition {
        let inst = &mut self.instances[idx];
        let from = inst.state;
        debug_assert!(crate::instance::is_legal_transition(Some(from), to), "{from:?} -> {to:?}");
        inst.state = to;
        let t = Transition {
            seq,
            instance_id: inst.instance_id.clone(),
            service_id: inst.spec.service_id.clone(),
            from: Some(from),
            to,
        };
        tracing::debug!(instance = %t.instance_id, service = %t.service_id, "{} -> {}", from.name(), to.name());
        self.transitions.push(t.clone());
        t
    }

    /// Pops and dispatches bus events until the bus is empty.
    pub fn drain(&mut self) -> Vec<Transition> {
        let mut out = Vec::new();
        let mut processed = 0;
        while let Some(event) = self.bus.pop() {
            out.extend(self.dispatch(&event));
            processed += 1;
            if processed >= MAX_EVENTS_PER_DRAIN {
                tracing::error!(
                    "event loop processed {MAX_EVENTS_PER_DRAIN} events without settling; \
                     a service probably writes to its own inputs"
                );
                break;
            }
        }
        out
    }

    /// Applies one event and returns the transitions it caused.
    pub fn dispatch(&mut self, event: &LifecycleEvent) -> Vec<Transition> {
        let mut out = Vec::new();
        match &event.payload {
            EventPayload::Tick { .. } | EventPayload::HealthReport { .. } => {
                let outcome = evaluate_termination_triggers(event, &self.instances);
                for (id, failures) in outcome.health_counters {
                    if let Some(&i) = self.index.get(&id) {
                        self.instances[i].consecutive_health_failures = failures;
                    }
                }
                for action in outcome.actions {
                    if let ServiceAction::Terminate { instance, reason } = action {
                        if let Some(&i) = self.index.get(&instance) {
                            self.terminate_idx(i, reason, event.seq, &mut out);
                        }
                    }
                }
            }
            EventPayload::Update(UpdatePayload::SubmodelDeleted) => {
                let Some(subject) = &event.subject else { return out };
                let doomed: Vec<usize> = (0..self.instances.len())
                    .filter(|&i| self.instances[i].is_running() && self.instances[i].source_submodel == subject.submodel_id)
                    .collect();
                let orphaned: Vec<IdShort> = self
                    .specs
                    .iter()
                    .filter(|s| s.binding.source_submodel == subject.submodel_id)
                    .map(|s| s.binding.spec.service_id.clone())
                    .collect();
                // Unregister first so a queued activation cannot restart the service.
                for service_id in &orphaned {
                    self.unregister_spec(service_id);
                }
                for i in doomed {
                    self.terminate_idx(i, TerminationReason::SourceDeleted, event.seq, &mut out);
                }
            }
            _ => {
                let bindings: Vec<SpecBinding> = self.specs.iter().map(|s| s.binding.clone()).collect();
                for action in evaluate_execution_triggers(event, &bindings) {
                    if let ServiceAction::Activate { service_id, .. } = action {
                        self.activate(&service_id, event, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Applies the re-activation policy and starts an instance when allowed.
    fn activate(&mut self, service_id: &IdShort, cause: &LifecycleEvent, out: &mut Vec<Transition>) {
        let Some(spec) = self.spec(service_id).cloned() else { return };
        let running: Vec<usize> = (0..self.instances.len())
            .filter(|&i| self.instances[i].is_running() && &self.instances[i].spec.service_id == service_id)
            .collect();
        if !running.is_empty() {
            match spec.binding.spec.reactivation {
                ReactivationPolicy::Restart => {
                    for i in running {
                        self.terminate_idx(i, TerminationReason::Superseded, cause.seq, out);
                    }
                }
                ReactivationPolicy::QueueOne => {
                    self.queued.insert(service_id.clone(), cause.clone());
                    return;
                }
                ReactivationPolicy::IgnoreWhileRunning => {
                    tracing::debug!(service = %service_id, "activation ignored while running");
                    return;
                }
            }
        }
        self.start(&spec, cause, out);
    }

    fn start(&mut self, registered: &RegisteredSpec, cause: &LifecycleEvent, out: &mut Vec<Transition>) {
        let spec = registered.binding.spec.clone();
        let instance_id = InstanceId::from_counter(self.next_instance);
        self.next_instance += 1;
        let now = self.now();
        self.instances.push(ServiceInstance {
            instance_id: instance_id.clone(),
            source_submodel: registered.binding.source_submodel.clone(),
            spec: spec.clone(),
            state: InstanceState::Registered,
            image_id: None,
            container_id: None,
            created_at: now,
            started_at: None,
            terminated_at: None,
            consecutive_health_failures: 0,
            last_health_poll: None,
            cause: cause.clone(),
            diagnostics: Vec::new(),
        });
        let idx = self.instances.len() - 1;
        self.index.insert(instance_id.clone(), idx);
        let created = Transition {
            seq: cause.seq,
            instance_id,
            service_id: spec.service_id.clone(),
            from: None,
            to: InstanceState::Registered,
        };
        self.transitions.push(created.clone());
        out.push(created);
        out.push(self.transition(idx, InstanceState::Building, cause.seq));

        let image = match self.resolve_image(&spec.context, registered.pinned_hash.as_deref(), &spec.service_id) {
            Ok(image) => image,
            Err(diagnostic) => {
                self.instances[idx].diagnostics.push(diagnostic);
                self.instances[idx].terminated_at = Some(self.now());
                out.push(self.transition(idx, InstanceState::Terminated(TerminationReason::BuildFailed), cause.seq));
                return;
            }
        };
        self.instances[idx].image_id = Some(image.clone());
        let env = self.environment(&self.instances[idx]);
        let labels = BTreeMap::from([
            ("aasrt.instance".to_string(), self.instances[idx].instance_id.to_string()),
            ("aasrt.service".to_string(), spec.service_id.to_string()),
        ]);
        match self.engine.run(&image, &env, &labels) {
            Ok(container_id) => {
                let now = self.now();
                let inst = &mut self.instances[idx];
                inst.container_id = Some(container_id);
                inst.started_at = Some(now);
                out.push(self.transition(idx, InstanceState::Running, cause.seq));
            }
            Err(e) => {
                self.instances[idx].diagnostics.push(e.to_string());
                self.instances[idx].terminated_at = Some(self.now());
                out.push(self.transition(idx, InstanceState::Terminated(TerminationReason::RunFailed), cause.seq));
            }
        }
    }

    fn resolve_image(&mut self, context: &ContextRef, pinned: Option<&str>, service_id: &IdShort) -> Result<String, String> {
        match context {
            ContextRef::Image { name } => {
                let key = format!("image:{name}");
                if let Some(id) = self.images.get(&key) {
                    return Ok(id.clone());
                }
                let id = self.engine.pull(name).map_err(|e| e.to_string())?;
                self.images.insert(key, id.clone());
                Ok(id)
            }
            ContextRef::Package {
                service_ref,
                content_hash,
            } => {
                let hash = match pinned.or(content_hash.as_deref()) {
                    Some(h) => h.to_string(),
                    None => self
                        .store
                        .list_versions(service_ref)
                        .first()
                        .map(|m| m.content_hash.clone())
                        .ok_or_else(|| format!("no stored context for {service_ref}"))?,
                };
                if let Some(id) = self.images.get(&hash) {
                    return Ok(id.clone());
                }
                let tree = self.store.retrieve_context(service_ref, &hash).map_err(|e| e.to_string())?;
                let id = self
                    .engine
                    .build(&tree, &image_tag(service_id.as_str(), &hash))
                    .map_err(|e| e.to_string())?;
                self.images.insert(hash, id.clone());
                Ok(id)
            }
        }
    }

    /// The injected environment contract.
    fn environment(&self, inst: &ServiceInstance) -> BTreeMap<String, String> {
        let spec = &inst.spec;
        let mut env = spec.env_extra.clone();
        env.extend(self.config.runtime_env.clone());
        env.insert("AAS_API_BASE".into(), self.config.api_base.clone());
        env.insert("AAS_SERVICE_ID".into(), spec.service_id.to_string());
        env.insert("AAS_CAUSE_KIND".into(), inst.cause.kind().as_str().into());
        for input in &spec.inputs {
            env.insert(format!("AAS_INPUT_{}", input.name), input.reference.canonical_path());
        }
        for output in &spec.outputs {
            env.insert(format!("AAS_OUTPUT_{}", output.name), output.reference.canonical_path());
        }
        env
    }

    /// Stops and removes the container of a running instance and records the reason.
    fn terminate_idx(&mut self, idx: usize, reason: TerminationReason, seq: u64, out: &mut Vec<Transition>) {
        if !self.instances[idx].is_running() {
            return;
        }
        if let Some(container) = self.instances[idx].container_id.clone() {
            let exited = matches!(reason, TerminationReason::Completed(_));
            if !exited {
                if let Err(e) = self.engine.stop(&container, self.config.stop_grace) {
                    self.instances[idx].diagnostics.push(format!("stop: {e}"));
                }
            }
            if let Err(e) = self.engine.remove(&container) {
                self.instances[idx].diagnostics.push(format!("remove: {e}"));
            }
        }
        self.instances[idx].terminated_at = Some(self.now());
        out.push(self.transition(idx, InstanceState::Terminated(reason), seq));

        let service_id = self.instances[idx].spec.service_id.clone();
        if let Some(pending) = self.queued.remove(&service_id) {
            if let Some(spec) = self.spec(&service_id).cloned() {
                self.start(&spec, &pending, out);
            }
        }
    }

    /// Operator-initiated termination.
    pub fn terminate(&mut self, id: &InstanceId, reason: TerminationReason) -> Result<Vec<Transition>, OrchestratorError> {
        let &idx = self
            .index
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownInstance(id.clone()))?;
        if self.instances[idx].state.is_terminated() {
            return Err(OrchestratorError::AlreadyTerminated(id.clone()));
        }
        let mut out = Vec::new();
        self.terminate_idx(idx, reason, 0, &mut out);
        Ok(out)
    }

    /// Reaps exited containers, then emits a Tick and due health reports and drains the bus.
    pub fn supervision_tick(&mut self, now: Timestamp) -> Vec<Transition> {
        let mut out = Vec::new();
        for idx in 0..self.instances.len() {
            let inst = &self.instances[idx];
            let Some(container) = inst.container_id.clone().filter(|_| inst.is_running()) else {
                continue;
            };
            match self.engine.inspect(&container) {
                Ok(status) if status.state == ContainerState::Exited => {
                    let code = status.exit_code.unwrap_or(-1);
                    self.terminate_idx(idx, TerminationReason::Completed(code), 0, &mut out);
                }
                Ok(_) => {}
                Err(crate::engine::EngineError::UnknownContainer(_)) => {
                    self.instances[idx].diagnostics.push("container disappeared".into());
                    self.terminate_idx(idx, TerminationReason::Completed(-1), 0, &mut out);
                }
                Err(e) => tracing::warn!(instance = %self.instances[idx].instance_id, "inspect failed: {e}"),
            }
        }
        self.bus.emit(None, EventPayload::Tick { now });
        for idx in 0..self.instances.len() {
            let inst = &self.instances[idx];
            let (Some(health), Some(container), Some(started)) = (inst.spec.health, inst.container_id.clone(), inst.started_at)
            else {
                continue;
            };
            if !inst.is_running() {
                continue;
            }
            let due = now.saturating_sub(inst.last_health_poll.unwrap_or(started)) >= health.interval;
            if !due {
                continue;
            }
            let healthy = match self.engine.health(&container) {
                Ok(HealthStatus::Healthy) => true,
                Ok(HealthStatus::Unhealthy) => false,
                Ok(HealthStatus::Unsupported) => self
                    .engine
                    .inspect(&container)
                    .is_ok_and(|s| s.state == ContainerState::Running),
                Err(e) => {
                    tracing::warn!(instance = %inst.instance_id, "health poll failed: {e}");
                    false
                }
            };
            let id = inst.instance_id.clone();
            self.instances[idx].last_health_poll = Some(now);
            self.bus.emit(None, EventPayload::HealthReport { instance: id, healthy });
        }
        out.extend(self.drain());
        out
    }

    /// Terminates every running instance with `OperatorStop`.
    pub fn shutdown(&mut self) -> Vec<Transition> {
        self.queued.clear();
        let mut out = Vec::new();
        for idx in 0..self.instances.len() {
            self.terminate_idx(idx, TerminationReason::OperatorStop, 0, &mut out);
        }
        out
    }

    /// Instances created by the event with sequence number `seq`.
    pub fn instances_caused_by(&self, seq: u64) -> Vec<&ServiceInstance> {
        self.instances.iter().filter(|i| i.cause.seq == seq).collect()
    }

    pub fn sources(&self) -> Vec<AasId> {
        self.specs.iter().map(|s| s.binding.source_submodel.clone()).collect()
    }
}

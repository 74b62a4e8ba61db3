//! Conditional activation and termination logic.
//!
//! Both evaluators are pure: the orchestrator owns all state and applies the
//! returned actions.

use serde::Serialize;

use super::{ExecutionTrigger, ServiceExecutionSpec, TerminationTrigger};
use crate::events::{EventPayload, LifecycleEvent, UpdatePayload};
use crate::instance::{InstanceId, ServiceInstance, TerminationReason};
use crate::model::{AasId, IdShort};

/// A registered spec together with the submodel that carries it.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SpecBinding {
    pub spec: ServiceExecutionSpec,
    pub source_submodel: AasId,
    pub shell: Option<AasId>,
}

impl SpecBinding {
    pub fn new(spec: ServiceExecutionSpec, source_submodel: AasId) -> Self {
        Self {
            spec,
            source_submodel,
            shell: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "action")]
pub enum ServiceAction {
    Activate {
        service_id: IdShort,
        source_submodel: AasId,
        cause_seq: u64,
    },
    Terminate {
        instance: InstanceId,
        reason: TerminationReason,
    },
    NoAction,
}

impl ServiceAction {
    pub fn is_activate(&self) -> bool {
        matches!(self, ServiceAction::Activate { .. })
    }
}

/// One action per binding, in binding order.
///
/// Multiple triggers combine with OR. Only Import, Update, Access and Demand
/// events can activate; every other kind yields `NoAction` for all bindings.
pub fn evaluate_execution_triggers(event: &LifecycleEvent, bindings: &[SpecBinding]) -> Vec<ServiceAction> {
    bindings
        .iter()
        .map(|binding| {
            if should_activate(event, binding) {
                ServiceAction::Activate {
                    service_id: binding.spec.service_id.clone(),
                    source_submodel: binding.source_submodel.clone(),
                    cause_seq: event.seq,
                }
            } else {
                ServiceAction::NoAction
            }
        })
        .collect()
}

fn should_activate(event: &LifecycleEvent, binding: &SpecBinding) -> bool {
    let spec = &binding.spec;
    let subject = event.subject.as_ref();
    match &event.payload {
        EventPayload::Import { .. } => {
            spec.has_trigger(ExecutionTrigger::OnInitialize)
                && subject.is_some_and(|s| s.submodel_id == binding.source_submodel)
        }
        EventPayload::Update(UpdatePayload::SubmodelDeleted) => false,
        EventPayload::Update(_) => {
            spec.has_trigger(ExecutionTrigger::OnUpdate)
                && subject.is_some_and(|s| spec.inputs.iter().any(|i| i.reference.overlaps(s)))
        }
        EventPayload::Access => {
            spec.has_trigger(ExecutionTrigger::OnAccess)
                && subject.is_some_and(|s| spec.inputs.iter().any(|i| i.reference.submodel_id == s.submodel_id))
        }
        EventPayload::Demand { service_id } => {
            spec.has_trigger(ExecutionTrigger::OnDemand) && *service_id == spec.service_id
        }
        EventPayload::Tick { .. } | EventPayload::HealthReport { .. } => false,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TerminationOutcome {
    pub actions: Vec<ServiceAction>,
    /// New consecutive-failure counts to store back into the instance table.
    pub health_counters: Vec<(InstanceId, u32)>,
}

/// Applies timeout and health policies to running instances.
///
/// `Tick` yields one action per running instance; `HealthReport` yields one
/// action for the reported instance when it is running.
pub fn evaluate_termination_triggers(event: &LifecycleEvent, instances: &[ServiceInstance]) -> TerminationOutcome {
    let mut out = TerminationOutcome::default();
    match &event.payload {
        EventPayload::Tick { now } => {
            for inst in instances.iter().filter(|i| i.is_running()) {
                let expired = match (inst.spec.timeout, inst.started_at) {
                    (Some(timeout), Some(started)) if inst.spec.has_termination(TerminationTrigger::OnTimeout) => {
                        now.saturating_sub(started) >= timeout
                    }
                    _ => false,
                };
                out.actions.push(if expired {
                    ServiceAction::Terminate {
                        instance: inst.instance_id.clone(),
                        reason: TerminationReason::Timeout,
                    }
                } else {
                    ServiceAction::NoAction
                });
            }
        }
        EventPayload::HealthReport { instance, healthy } => {
            let Some(inst) = instances.iter().find(|i| &i.instance_id == instance && i.is_running()) else {
                return out;
            };
            let failures = if *healthy {
                0
            } else {
                inst.consecutive_health_failures.saturating_add(1)
            };
            out.health_counters.push((inst.instance_id.clone(), failures));
            let limit = inst
                .spec
                .health
                .filter(|_| inst.spec.has_termination(TerminationTrigger::OnHealthCheckFail))
                .map(|h| h.max_failures);
            out.actions.push(match limit {
                Some(max) if failures >= max => ServiceAction::Terminate {
                    instance: inst.instance_id.clone(),
                    reason: TerminationReason::HealthCheckFail,
                },
                _ => ServiceAction::NoAction,
            });
        }
        _ => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::clock::Timestamp;
    use crate::instance::InstanceState;
    use crate::model::ElementReference;
    use crate::service_execution::ContextRef;

    fn id(s: &str) -> AasId {
        AasId::new(s).unwrap()
    }

    fn spec() -> ServiceExecutionSpec {
        ServiceExecutionSpec::new(
            IdShort::new("svc").unwrap(),
            ContextRef::Image { name: "img".into() },
            [ExecutionTrigger::OnUpdate],
        )
        .with_input("POS", ElementReference::from_dotted(id("urn:x:cps"), "Position").unwrap())
    }

    fn event(seq: u64, subject: Option<ElementReference>, payload: EventPayload) -> LifecycleEvent {
        LifecycleEvent { seq, subject, payload }
    }

    fn instance(spec: ServiceExecutionSpec, started: u64) -> ServiceInstance {
        ServiceInstance {
            instance_id: InstanceId::from_counter(1),
            source_submodel: id("urn:x:spec"),
            spec,
            state: InstanceState::Running,
            image_id: Some("img".into()),
            container_id: Some("c1".into()),
            created_at: Timestamp(started),
            started_at: Some(Timestamp(started)),
            terminated_at: None,
            consecutive_health_failures: 0,
            last_health_poll: None,
            cause: event(1, None, EventPayload::Access),
            diagnostics: vec![],
        }
    }

    fn value_update(subject: ElementReference) -> LifecycleEvent {
        event(
            7,
            Some(subject),
            EventPayload::Update(UpdatePayload::Value {
                old: crate::model::Value::Double(99.0),
                new: crate::model::Value::Double(100.0),
            }),
        )
    }

    #[test]
    fn update_on_input_activates() {
        let b = SpecBinding::new(spec(), id("urn:x:spec"));
        let e = value_update(ElementReference::from_dotted(id("urn:x:cps"), "Position.X").unwrap());
        assert_eq!(
            evaluate_execution_triggers(&e, std::slice::from_ref(&b)),
            vec![ServiceAction::Activate {
                service_id: b.spec.service_id.clone(),
                source_submodel: id("urn:x:spec"),
                cause_seq: 7
            }]
        );
        let unrelated = value_update(ElementReference::from_dotted(id("urn:x:other"), "Position.X").unwrap());
        assert_eq!(evaluate_execution_triggers(&unrelated, &[b]), vec![ServiceAction::NoAction]);
    }

    #[test]
    fn access_does_not_wake_on_demand_only() {
        let mut s = spec();
        s.execution_triggers = [ExecutionTrigger::OnDemand].into();
        let b = SpecBinding::new(s, id("urn:x:spec"));
        let e = event(3, Some(ElementReference::submodel(id("urn:x:cps"))), EventPayload::Access);
        assert_eq!(evaluate_execution_triggers(&e, &[b]), vec![ServiceAction::NoAction]);
    }

    #[test]
    fn timeout_boundary_is_inclusive() {
        let inst = instance(spec().with_timeout(Duration::from_secs(5)), 10_000);
        let tick = |t| event(1, None, EventPayload::Tick { now: Timestamp(t) });
        let out = evaluate_termination_triggers(&tick(14_900), std::slice::from_ref(&inst));
        assert_eq!(out.actions, vec![ServiceAction::NoAction]);
        let out = evaluate_termination_triggers(&tick(15_000), std::slice::from_ref(&inst));
        assert_eq!(
            out.actions,
            vec![ServiceAction::Terminate {
                instance: inst.instance_id.clone(),
                reason: TerminationReason::Timeout
            }]
        );
    }

    /// Counter automaton: reset on healthy, increment on unhealthy, fire at the limit.
    fn run_timeline(max: u32, timeline: &[bool]) -> Option<usize> {
        let mut inst = instance(spec().with_health(Duration::from_secs(1), max), 0);
        for (i, healthy) in timeline.iter().enumerate() {
            let e = event(
                i as u64,
                None,
                EventPayload::HealthReport {
                    instance: inst.instance_id.clone(),
                    healthy: *healthy,
                },
            );
            let out = evaluate_termination_triggers(&e, std::slice::from_ref(&inst));
            inst.consecutive_health_failures = out.health_counters[0].1;
            if out.actions.iter().any(|a| matches!(a, ServiceAction::Terminate { .. })) {
                return Some(i);
            }
        }
        None
    }

    #[test]
    fn health_counter_resets() {
        assert_eq!(run_timeline(3, &[false, false, true, false, false]), None);
        assert_eq!(run_timeline(3, &[true, true, false, false, false]), Some(4));
        assert_eq!(run_timeline(2, &[false, true, false, true]), None);
    }

    #[test]
    fn no_termination_triggers_never_terminate() {
        let inst = instance(spec(), 0);
        let tick = event(1, None, EventPayload::Tick { now: Timestamp(u64::MAX) });
        assert_eq!(
            evaluate_termination_triggers(&tick, std::slice::from_ref(&inst)).actions,
            vec![ServiceAction::NoAction]
        );
        let report = event(
            2,
            None,
            EventPayload::HealthReport {
                instance: inst.instance_id.clone(),
                healthy: false,
            },
        );
        assert_eq!(
            evaluate_termination_triggers(&report, std::slice::from_ref(&inst)).actions,
            vec![ServiceAction::NoAction]
        );
    }
}

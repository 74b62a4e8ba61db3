//! The Service Execution Submodel: schema, parser and trigger evaluation.
//!
//! A submodel is a service execution spec when its `semanticId` equals
//! [`SERVICE_EXECUTION_SEMANTIC_ID`]. Its top-level layout:
//!
//! | idShort               | element                 | required |
//! |-----------------------|-------------------------|----------|
//! | `ServiceId`           | string property         | yes      |
//! | `Context`             | collection: `ServiceRef` or `Image`, optional `ContentHash` | yes |
//! | `ExecutionTriggers`   | collection of string properties | yes, non-empty |
//! | `TerminationTriggers` | collection of string properties | no |
//! | `Inputs` / `Outputs`  | collections of reference elements, idShort = env name | no |
//! | `Environment`         | collection of string properties | no |
//! | `TimeoutMs`           | integer property        | iff `onTimeout` |
//! | `HealthCheck`         | collection: `IntervalMs`, `MaxFailures` | iff `onHealthCheckFail` |
//! | `ReactivationPolicy`  | string property         | no, default `restart` |

mod triggers;

pub use triggers::{
    evaluate_execution_triggers, evaluate_termination_triggers, ServiceAction, SpecBinding, TerminationOutcome,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::model::{AasId, Collection, ElementReference, IdShort, Submodel, SubmodelElement, Value};

pub const SERVICE_EXECUTION_SEMANTIC_ID: &str = "urn:aasrt:submodel-template:ServiceExecution:1:0";

/// Environment variables with this prefix are reserved for the runtime.
pub const RESERVED_ENV_PREFIX: &str = "AAS_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ExecutionTrigger {
    #[serde(rename = "onInitialize")]
    OnInitialize,
    #[serde(rename = "onUpdate")]
    OnUpdate,
    #[serde(rename = "onAccess")]
    OnAccess,
    #[serde(rename = "onDemand")]
    OnDemand,
}

impl ExecutionTrigger {
    pub const ALL: [ExecutionTrigger; 4] = [
        ExecutionTrigger::OnInitialize,
        ExecutionTrigger::OnUpdate,
        ExecutionTrigger::OnAccess,
        ExecutionTrigger::OnDemand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionTrigger::OnInitialize => "onInitialize",
            ExecutionTrigger::OnUpdate => "onUpdate",
            ExecutionTrigger::OnAccess => "onAccess",
            ExecutionTrigger::OnDemand => "onDemand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum TerminationTrigger {
    #[serde(rename = "onTimeout")]
    OnTimeout,
    #[serde(rename = "onHealthCheckFail")]
    OnHealthCheckFail,
}

impl TerminationTrigger {
    pub const ALL: [TerminationTrigger; 2] = [TerminationTrigger::OnTimeout, TerminationTrigger::OnHealthCheckFail];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationTrigger::OnTimeout => "onTimeout",
            TerminationTrigger::OnHealthCheckFail => "onHealthCheckFail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// Where the service image comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "source", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum ContextRef {
    /// Build context shipped in a package, optionally pinned to a content hash.
    Package {
        service_ref: IdShort,
        content_hash: Option<String>,
    },
    /// Pre-built image pulled by name.
    Image { name: String },
}

/// What to do when a service is activated while an instance of it is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReactivationPolicy {
    /// Terminate the running instance (`Superseded`) and start a new one.
    #[default]
    Restart,
    /// Keep one pending activation and start it once the running instance ends.
    QueueOne,
    IgnoreWhileRunning,
}

impl ReactivationPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ReactivationPolicy::Restart => "restart",
            ReactivationPolicy::QueueOne => "queue-one",
            ReactivationPolicy::IgnoreWhileRunning => "ignore-while-running",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ReactivationPolicy::Restart,
            ReactivationPolicy::QueueOne,
            ReactivationPolicy::IgnoreWhileRunning,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HealthPolicy {
    #[serde(with = "millis")]
    pub interval: Duration,
    pub max_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NamedRef {
    pub name: String,
    pub reference: ElementReference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceExecutionSpec {
    pub service_id: IdShort,
    pub context: ContextRef,
    pub execution_triggers: BTreeSet<ExecutionTrigger>,
    pub termination_triggers: BTreeSet<TerminationTrigger>,
    pub inputs: Vec<NamedRef>,
    pub outputs: Vec<NamedRef>,
    pub env_extra: BTreeMap<String, String>,
    #[serde(with = "opt_millis")]
    pub timeout: Option<Duration>,
    pub health: Option<HealthPolicy>,
    pub reactivation: ReactivationPolicy,
}

mod millis {
    use std::time::Duration;
    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
}

mod opt_millis {
    use std::time::Duration;
    pub fn serialize<S: serde::Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&(d.as_millis() as u64)),
            None => s.serialize_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed service execution submodel {submodel}: {}", violations.join("; "))]
pub struct MalformedSpec {
    pub submodel: AasId,
    pub violations: Vec<String>,
}

/// Valid environment variable name: uppercase letter, then uppercase letters, digits, `_`.
pub fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

impl ServiceExecutionSpec {
    /// A spec with the given triggers and nothing else configured.
    pub fn new(service_id: IdShort, context: ContextRef, triggers: impl IntoIterator<Item = ExecutionTrigger>) -> Self {
        Self {
            service_id,
            context,
            execution_triggers: triggers.into_iter().collect(),
            termination_triggers: BTreeSet::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            env_extra: BTreeMap::new(),
            timeout: None,
            health: None,
            reactivation: ReactivationPolicy::Restart,
        }
    }

    pub fn with_input(mut self, name: &str, reference: ElementReference) -> Self {
        self.inputs.push(NamedRef {
            name: name.to_string(),
            reference,
        });
        self
    }

    pub fn with_output(mut self, name: &str, reference: ElementReference) -> Self {
        self.outputs.push(NamedRef {
            name: name.to_string(),
            reference,
        });
        self
    }

    pub fn with_env(mut self, key: &str, value: impl Into<String>) -> Self {
        self.env_extra.insert(key.to_string(), value.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.termination_triggers.insert(TerminationTrigger::OnTimeout);
        self.timeout = Some(timeout);
        self
    }

    pub fn with_health(mut self, interval: Duration, max_failures: u32) -> Self {
        self.termination_triggers.insert(TerminationTrigger::OnHealthCheckFail);
        self.health = Some(HealthPolicy { interval, max_failures });
        self
    }

    pub fn with_reactivation(mut self, policy: ReactivationPolicy) -> Self {
        self.reactivation = policy;
        self
    }

    pub fn has_trigger(&self, trigger: ExecutionTrigger) -> bool {
        self.execution_triggers.contains(&trigger)
    }

    pub fn has_termination(&self, trigger: TerminationTrigger) -> bool {
        self.termination_triggers.contains(&trigger)
    }

    /// Every invariant breach, empty when the spec is well formed.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.execution_triggers.is_empty() {
            v.push("ExecutionTriggers must not be empty".to_string());
        }
        for (label, refs) in [("Inputs", &self.inputs), ("Outputs", &self.outputs)] {
            let mut seen = BTreeSet::new();
            for r in refs {
                if !is_env_name(&r.name) {
                    v.push(format!("{label}.{} is not an environment variable name", r.name));
                }
                if !seen.insert(&r.name) {
                    v.push(format!("{label}.{} declared twice", r.name));
                }
            }
        }
        for key in self.env_extra.keys() {
            if !is_env_name(key) {
                v.push(format!("Environment.{key} is not an environment variable name"));
            } else if key.starts_with(RESERVED_ENV_PREFIX) {
                v.push(format!("Environment.{key} uses the reserved prefix {RESERVED_ENV_PREFIX}"));
            }
        }
        let on_timeout = self.has_termination(TerminationTrigger::OnTimeout);
        match (on_timeout, self.timeout) {
            (true, None) => v.push("onTimeout requires TimeoutMs".to_string()),
            (false, Some(_)) => v.push("TimeoutMs given without onTimeout".to_string()),
            (true, Some(t)) if t.is_zero() => v.push("TimeoutMs must be positive".to_string()),
            _ => {}
        }
        let on_health = self.has_termination(TerminationTrigger::OnHealthCheckFail);
        match (on_health, self.health) {
            (true, None) => v.push("onHealthCheckFail requires HealthCheck".to_string()),
            (false, Some(_)) => v.push("HealthCheck given without onHealthCheckFail".to_string()),
            (true, Some(h)) => {
                if h.interval.is_zero() {
                    v.push("HealthCheck.IntervalMs must be positive".to_string());
                }
                if h.max_failures == 0 {
                    v.push("HealthCheck.MaxFailures must be positive".to_string());
                }
            }
            _ => {}
        }
        if let ContextRef::Image { name } = &self.context {
            if name.trim().is_empty() {
                v.push("Context.Image must not be empty".to_string());
            }
        }
        if let ContextRef::Package {
            content_hash: Some(hash),
            ..
        } = &self.context
        {
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
                v.push(format!("Context.ContentHash {hash:?} is not a lowercase SHA-256 hex digest"));
            }
        }
        v
    }

    /// Renders this spec as a Service Execution Submodel.
    pub fn to_submodel(&self, id: AasId, id_short: IdShort) -> Submodel {
        let prop = |name: &str, value: Value| SubmodelElement::property(name, value).expect("template idShort");
        let coll = |name: &str, children: Vec<SubmodelElement>| {
            SubmodelElement::collection(name, children).expect("template idShort")
        };
        let mut context = Vec::new();
        match &self.context {
            ContextRef::Package {
                service_ref,
                content_hash,
            } => {
                context.push(prop("ServiceRef", Value::String(service_ref.to_string())));
                if let Some(h) = content_hash {
                    context.push(prop("ContentHash", Value::String(h.clone())));
                }
            }
            ContextRef::Image { name } => context.push(prop("Image", Value::String(name.clone()))),
        }
        let trigger_list = |names: Vec<&str>| {
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| prop(&format!("Trigger{}", i + 1), Value::String(n.to_string())))
                .collect::<Vec<_>>()
        };
        let refs = |list: &[NamedRef]| {
            list.iter()
                .map(|r| SubmodelElement::reference(&r.name, r.reference.clone()).expect("env name is an idShort"))
                .collect::<Vec<_>>()
        };

        let mut sm = Submodel::new(id, id_short)
            .with_semantic_id(SERVICE_EXECUTION_SEMANTIC_ID)
            .with_element(prop("ServiceId", Value::String(self.service_id.to_string())))
            .with_element(coll("Context", context))
            .with_element(coll(
                "ExecutionTriggers",
                trigger_list(self.execution_triggers.iter().map(|t| t.as_str()).collect()),
            ));
        if !self.termination_triggers.is_empty() {
            sm = sm.with_element(coll(
                "TerminationTriggers",
                trigger_list(self.termination_triggers.iter().map(|t| t.as_str()).collect()),
            ));
        }
        sm = sm
            .with_element(coll("Inputs", refs(&self.inputs)))
            .with_element(coll("Outputs", refs(&self.outputs)));
        if !self.env_extra.is_empty() {
            sm = sm.with_element(coll(
                "Environment",
                self.env_extra
                    .iter()
                    .map(|(k, v)| prop(k, Value::String(v.clone())))
                    .collect(),
            ));
        }
        if let Some(t) = self.timeout {
            sm = sm.with_element(prop("TimeoutMs", Value::Integer(t.as_millis() as i64)));
        }
        if let Some(h) = self.health {
            sm = sm.with_element(coll(
                "HealthCheck",
                vec![
                    prop("IntervalMs", Value::Integer(h.interval.as_millis() as i64)),
                    prop("MaxFailures", Value::Integer(h.max_failures as i64)),
                ],
            ));
        }
        if self.reactivation != ReactivationPolicy::Restart {
            sm = sm.with_element(prop("ReactivationPolicy", Value::String(self.reactivation.as_str().into())));
        }
        sm
    }
}

impl fmt::Display for ServiceExecutionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.service_id)
    }
}

const KNOWN_TOP_LEVEL: [&str; 10] = [
    "ServiceId",
    "Context",
    "ExecutionTriggers",
    "TerminationTriggers",
    "Inputs",
    "Outputs",
    "Environment",
    "TimeoutMs",
    "HealthCheck",
    "ReactivationPolicy",
];

/// Extracts a spec from `sm`; `Ok(None)` for ordinary submodels.
pub fn parse_spec(sm: &Submodel) -> Result<Option<ServiceExecutionSpec>, MalformedSpec> {
    if sm.semantic_id.as_deref() != Some(SERVICE_EXECUTION_SEMANTIC_ID) {
        return Ok(None);
    }
    let mut p = Parser {
        sm,
        violations: Vec::new(),
    };
    let spec = p.parse();
    if p.violations.is_empty() {
        let spec = spec.expect("no violations implies a spec");
        let v = spec.violations();
        if v.is_empty() {
            return Ok(Some(spec));
        }
        p.violations = v;
    }
    Err(MalformedSpec {
        submodel: sm.id.clone(),
        violations: p.violations,
    })
}

struct Parser<'a> {
    sm: &'a Submodel,
    violations: Vec<String>,
}

impl<'a> Parser<'a> {
    fn top(&self, name: &str) -> Option<&'a SubmodelElement> {
        self.sm.elements.iter().find(|e| e.id_short().as_str() == name)
    }

    fn string_prop(&mut self, element: Option<&SubmodelElement>, label: &str) -> Option<String> {
        match element {
            None => None,
            Some(SubmodelElement::Property(p)) => match &p.value {
                Value::String(s) => Some(s.clone()),
                other => {
                    self.violations
                        .push(format!("{label} must be a string property, found {}", other.value_type()));
                    None
                }
            },
            Some(other) => {
                self.violations
                    .push(format!("{label} must be a property, found {}", other.kind()));
                None
            }
        }
    }

    fn int_prop(&mut self, element: Option<&SubmodelElement>, label: &str) -> Option<i64> {
        match element {
            None => None,
            Some(SubmodelElement::Property(p)) => match p.value {
                Value::Integer(i) if i >= 0 => Some(i),
                _ => {
                    self.violations
                        .push(format!("{label} must be a non-negative integer property"));
                    None
                }
            },
            Some(other) => {
                self.violations
                    .push(format!("{label} must be a property, found {}", other.kind()));
                None
            }
        }
    }

    fn collection(&mut self, element: Option<&'a SubmodelElement>, label: &str) -> Option<&'a Collection> {
        match element {
            None => None,
            Some(SubmodelElement::Collection(c)) => Some(c),
            Some(other) => {
                self.violations
                    .push(format!("{label} must be a collection, found {}", other.kind()));
                None
            }
        }
    }

    fn child<'c>(c: &'c Collection, name: &str) -> Option<&'c SubmodelElement> {
        c.children.iter().find(|e| e.id_short().as_str() == name)
    }

    fn trigger_names(&mut self, c: Option<&Collection>, label: &str) -> Vec<String> {
        let Some(c) = c else { return Vec::new() };
        let mut out = Vec::new();
        for child in &c.children {
            let name = format!("{label}.{}", child.id_short());
            if let Some(s) = self.string_prop(Some(child), &name) {
                out.push(s);
            }
        }
        out
    }

    fn refs(&mut self, c: Option<&Collection>, label: &str) -> Vec<NamedRef> {
        let Some(c) = c else { return Vec::new() };
        let mut out = Vec::new();
        for child in &c.children {
            match child {
                SubmodelElement::Reference(r) => out.push(NamedRef {
                    name: r.id_short.to_string(),
                    reference: r.target.clone(),
                }),
                other => self.violations.push(format!(
                    "{label}.{} must be a reference element, found {}",
                    other.id_short(),
                    other.kind()
                )),
            }
        }
        out
    }

    fn parse(&mut self) -> Option<ServiceExecutionSpec> {
        for e in &self.sm.elements {
            if !KNOWN_TOP_LEVEL.contains(&e.id_short().as_str()) {
                self.violations
                    .push(format!("unexpected element {} in service execution submodel", e.id_short()));
            }
        }

        let service_id = match self.string_prop(self.top("ServiceId"), "ServiceId") {
            Some(s) => match IdShort::new(s.clone()) {
                Ok(id) => Some(id),
                Err(_) => {
                    self.violations.push(format!("ServiceId {s:?} is not a valid idShort"));
                    None
                }
            },
            None => {
                if self.top("ServiceId").is_none() {
                    self.violations.push("ServiceId is missing".to_string());
                }
                None
            }
        };

        let context = match self.collection(self.top("Context"), "Context") {
            None => {
                if self.top("Context").is_none() {
                    self.violations.push("Context is missing".to_string());
                }
                None
            }
            Some(c) => {
                let service_ref = self.string_prop(Self::child(c, "ServiceRef"), "Context.ServiceRef");
                let image = self.string_prop(Self::child(c, "Image"), "Context.Image");
                let hash = self.string_prop(Self::child(c, "ContentHash"), "Context.ContentHash");
                for child in &c.children {
                    if !["ServiceRef", "Image", "ContentHash"].contains(&child.id_short().as_str()) {
                        self.violations
                            .push(format!("unexpected element Context.{}", child.id_short()));
                    }
                }
                match (service_ref, image) {
                    (Some(r), None) => match IdShort::new(r.clone()) {
                        Ok(service_ref) => Some(ContextRef::Package {
                            service_ref,
                            content_hash: hash,
                        }),
                        Err(_) => {
                            self.violations
                                .push(format!("Context.ServiceRef {r:?} is not a valid idShort"));
                            None
                        }
                    },
                    (None, Some(name)) => {
                        if hash.is_some() {
                            self.violations
                                .push("Context.ContentHash only applies to ServiceRef".to_string());
                        }
                        Some(ContextRef::Image { name })
                    }
                    (Some(_), Some(_)) => {
                        self.violations
                            .push("Context must name either ServiceRef or Image, not both".to_string());
                        None
                    }
                    (None, None) => {
                        self.violations
                            .push("Context must name ServiceRef or Image".to_string());
                        None
                    }
                }
            }
        };

        let exec_coll = self.collection(self.top("ExecutionTriggers"), "ExecutionTriggers");
        if self.top("ExecutionTriggers").is_none() {
            self.violations.push("ExecutionTriggers is missing".to_string());
        }
        let mut execution_triggers = BTreeSet::new();
        for name in self.trigger_names(exec_coll, "ExecutionTriggers") {
            match ExecutionTrigger::parse(&name) {
                Some(t) => {
                    execution_triggers.insert(t);
                }
                None => self.violations.push(format!("unknown execution trigger {name:?}")),
            }
        }

        let term_coll = self.collection(self.top("TerminationTriggers"), "TerminationTriggers");
        let mut termination_triggers = BTreeSet::new();
        for name in self.trigger_names(term_coll, "TerminationTriggers") {
            match TerminationTrigger::parse(&name) {
                Some(t) => {
                    termination_triggers.insert(t);
                }
                None => self.violations.push(format!("unknown termination trigger {name:?}")),
            }
        }

        let inputs_coll = self.collection(self.top("Inputs"), "Inputs");
        let inputs = self.refs(inputs_coll, "Inputs");
        let outputs_coll = self.collection(self.top("Outputs"), "Outputs");
        let outputs = self.refs(outputs_coll, "Outputs");

        let mut env_extra = BTreeMap::new();
        if let Some(c) = self.collection(self.top("Environment"), "Environment") {
            for child in &c.children {
                let label = format!("Environment.{}", child.id_short());
                if let Some(v) = self.string_prop(Some(child), &label) {
                    env_extra.insert(child.id_short().to_string(), v);
                }
            }
        }

        let timeout = self
            .int_prop(self.top("TimeoutMs"), "TimeoutMs")
            .map(|ms| Duration::from_millis(ms as u64));

        let health = match self.collection(self.top("HealthCheck"), "HealthCheck") {
            None => None,
            Some(c) => {
                let interval = self.int_prop(Self::child(c, "IntervalMs"), "HealthCheck.IntervalMs");
                let max = self.int_prop(Self::child(c, "MaxFailures"), "HealthCheck.MaxFailures");
                match (interval, max) {
                    (Some(i), Some(m)) if m <= u32::MAX as i64 => Some(HealthPolicy {
                        interval: Duration::from_millis(i as u64),
                        max_failures: m as u32,
                    }),
                    _ => {
                        self.violations
                            .push("HealthCheck requires IntervalMs and MaxFailures".to_string());
                        None
                    }
                }
            }
        };

        let reactivation = match self.string_prop(self.top("ReactivationPolicy"), "ReactivationPolicy") {
            None => ReactivationPolicy::Restart,
            Some(s) => ReactivationPolicy::parse(&s).unwrap_or_else(|| {
                self.violations.push(format!("unknown reactivation policy {s:?}"));
                ReactivationPolicy::Restart
            }),
        };

        Some(ServiceExecutionSpec {
            service_id: service_id?,
            context: context?,
            execution_triggers,
            termination_triggers,
            inputs,
            outputs,
            env_extra,
            timeout,
            health,
            reactivation,
        })
    }
}

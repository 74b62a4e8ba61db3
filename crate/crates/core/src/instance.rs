//! Service instances and their lifecycle state machine.

use std::fmt;

use serde::Serialize;

use crate::clock::Timestamp;
use crate::events::LifecycleEvent;
use crate::model::{AasId, IdShort};
use crate::service_execution::ServiceExecutionSpec;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl InstanceId {
    pub fn from_counter(n: u64) -> Self {
        Self(format!("inst-{n:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "reason", content = "exitCode")]
pub enum TerminationReason {
    Timeout,
    HealthCheckFail,
    Completed(i64),
    BuildFailed,
    RunFailed,
    SourceDeleted,
    Superseded,
    OperatorStop,
}

impl TerminationReason {
    /// Reasons that end an instance before it ever ran.
    pub fn is_startup_failure(self) -> bool {
        matches!(self, TerminationReason::BuildFailed | TerminationReason::RunFailed)
    }
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminationReason::Completed(code) => write!(f, "Completed({code})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "state", content = "termination")]
pub enum InstanceState {
    Registered,
    Building,
    Running,
    Terminated(TerminationReason),
}

impl InstanceState {
    pub fn is_terminated(&self) -> bool {
        matches!(self, InstanceState::Terminated(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            InstanceState::Registered => "Registered",
            InstanceState::Building => "Building",
            InstanceState::Running => "Running",
            InstanceState::Terminated(_) => "Terminated",
        }
    }
}

/// The legal transition relation. `from == None` is instance creation.
pub fn is_legal_transition(from: Option<InstanceState>, to: InstanceState) -> bool {
    use InstanceState::*;
    match (from, to) {
        (None, Registered) => true,
        (Some(Registered), Building) => true,
        (Some(Building), Running) => true,
        (Some(Building), Terminated(r)) => r.is_startup_failure(),
        (Some(Running), Terminated(r)) => !r.is_startup_failure(),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition {
    /// Sequence number of the event being processed, 0 for direct operator calls.
    pub seq: u64,
    pub instance_id: InstanceId,
    pub service_id: IdShort,
    pub from: Option<InstanceState>,
    pub to: InstanceState,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceInstance {
    pub instance_id: InstanceId,
    /// Submodel that carries the spec this instance was started from.
    pub source_submodel: AasId,
    pub spec: ServiceExecutionSpec,
    pub state: InstanceState,
    pub image_id: Option<String>,
    pub container_id: Option<String>,
    pub created_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub terminated_at: Option<Timestamp>,
    pub consecutive_health_failures: u32,
    pub last_health_poll: Option<Timestamp>,
    pub cause: LifecycleEvent,
    pub diagnostics: Vec<String>,
}

impl ServiceInstance {
    pub fn service_id(&self) -> &IdShort {
        &self.spec.service_id
    }

    pub fn is_running(&self) -> bool {
        self.state == InstanceState::Running
    }
}

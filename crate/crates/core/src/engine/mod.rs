//! The container engine seam and its deterministic in-process implementation.

mod simulated;

pub use simulated::{Behavior, BehaviorContext, BehaviorOutcome, EngineCall, SimulatedEngine};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::context_store::ContextTree;
use crate::model::Value;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("container engine unavailable: {0}")]
    Unavailable(String),
    #[error("image build failed: {0}")]
    BuildFailed(String),
    #[error("container start failed: {0}")]
    RunFailed(String),
    #[error("no behavior registered for {0}")]
    UnregisteredBehavior(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("engine error: {0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerState {
    Created,
    Running,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ContainerStatus {
    pub state: ContainerState,
    pub exit_code: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HealthStatus {
    Healthy,
    Unhealthy,
    /// The image defines no health check.
    Unsupported,
}

/// Operations the orchestrator needs from a container engine.
///
/// Implementations are shared across threads and must tolerate concurrent calls.
pub trait ContainerEngine: Send + Sync {
    /// Builds an image from a context tree and returns its id.
    fn build(&self, context: &ContextTree, tag: &str) -> Result<String, EngineError>;
    /// Makes a pre-built image available locally and returns its id.
    fn pull(&self, image: &str) -> Result<String, EngineError>;
    /// Creates and starts a container.
    fn run(
        &self,
        image_id: &str,
        env: &BTreeMap<String, String>,
        labels: &BTreeMap<String, String>,
    ) -> Result<String, EngineError>;
    fn stop(&self, container_id: &str, grace: Duration) -> Result<(), EngineError>;
    fn remove(&self, container_id: &str) -> Result<(), EngineError>;
    fn inspect(&self, container_id: &str) -> Result<ContainerStatus, EngineError>;
    fn health(&self, container_id: &str) -> Result<HealthStatus, EngineError>;
}

/// The runtime API as seen by a service: reads and writes by canonical path.
pub trait ServiceApi: Send + Sync {
    fn read(&self, canonical_path: &str) -> Result<Value, String>;
    fn write(&self, canonical_path: &str, value: Value) -> Result<(), String>;
}

/// Image tag used for context builds: `aasrt/<service>:<hash prefix>`.
pub fn image_tag(service_id: &str, content_hash: &str) -> String {
    format!("aasrt/{}:{}", service_id.to_ascii_lowercase(), &content_hash[..content_hash.len().min(12)])
}

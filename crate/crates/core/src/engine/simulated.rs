//! Deterministic container engine double.
//!
//! Behaviors are registered per context hash (or per image name for pulled
//! images) and run synchronously inside `run`. Every call is logged.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{ContainerEngine, ContainerState, ContainerStatus, EngineError, HealthStatus, ServiceApi};
use crate::context_store::ContextTree;
use crate::model::Value;
use crate::package::{tree_hash, CONTAINERFILE};

pub struct BehaviorContext<'a> {
    pub env: &'a BTreeMap<String, String>,
    pub api: &'a dyn ServiceApi,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BehaviorOutcome {
    /// `Some` when the process exits right after the behavior ran.
    pub exit_code: Option<i64>,
    /// Successive health poll results; the last one repeats. Empty means no health check.
    pub health: Vec<bool>,
}

impl BehaviorOutcome {
    pub fn exited(code: i64) -> Self {
        Self {
            exit_code: Some(code),
            health: Vec::new(),
        }
    }

    pub fn running(health: Vec<bool>) -> Self {
        Self {
            exit_code: None,
            health,
        }
    }
}

pub type Behavior = Arc<dyn Fn(&BehaviorContext<'_>) -> BehaviorOutcome + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineCall {
    Build { tag: String, context_hash: String },
    Pull { image: String },
    Run { image_id: String, container_id: String, env: BTreeMap<String, String> },
    Stop { container_id: String },
    Remove { container_id: String },
    Inspect { container_id: String },
    Health { container_id: String },
}

impl EngineCall {
    pub fn name(&self) -> &'static str {
        match self {
            EngineCall::Build { .. } => "build",
            EngineCall::Pull { .. } => "pull",
            EngineCall::Run { .. } => "run",
            EngineCall::Stop { .. } => "stop",
            EngineCall::Remove { .. } => "remove",
            EngineCall::Inspect { .. } => "inspect",
            EngineCall::Health { .. } => "health",
        }
    }
}

struct Container {
    state: ContainerState,
    exit_code: Option<i64>,
    health: Vec<bool>,
    polls: usize,
}

#[derive(Default)]
struct State {
    behaviors: HashMap<String, Behavior>,
    fallback: Option<Behavior>,
    /// image id -> behavior key
    images: HashMap<String, String>,
    containers: BTreeMap<String, Container>,
    next_container: u64,
    calls: Vec<EngineCall>,
    unavailable: bool,
    fail_builds: bool,
    fail_runs: bool,
}

struct NoApi;

impl ServiceApi for NoApi {
    fn read(&self, _: &str) -> Result<Value, String> {
        Err("no runtime API attached to the simulated engine".into())
    }
    fn write(&self, _: &str, _: Value) -> Result<(), String> {
        Err("no runtime API attached to the simulated engine".into())
    }
}

/// Cloneable handle; clones share state, so tests can keep one to inspect calls.
#[derive(Clone, Default)]
pub struct SimulatedEngine {
    state: Arc<Mutex<State>>,
    api: Arc<Mutex<Option<Arc<dyn ServiceApi>>>>,
}

impl std::fmt::Debug for SimulatedEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedEngine").finish_non_exhaustive()
    }
}

fn first_instruction(containerfile: &[u8]) -> Option<String> {
    String::from_utf8_lossy(containerfile)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .and_then(|l| l.split_whitespace().next())
        .map(str::to_ascii_uppercase)
}

impl SimulatedEngine {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Wires behaviors to the runtime API they read and write through.
    pub fn attach_api(&self, api: Arc<dyn ServiceApi>) {
        *self.api.lock().unwrap_or_else(|e| e.into_inner()) = Some(api);
    }

    /// Registers the behavior run by containers built from `key` (a context hash or image name).
    pub fn register_behavior<F>(&self, key: impl Into<String>, behavior: F)
    where
        F: Fn(&BehaviorContext<'_>) -> BehaviorOutcome + Send + Sync + 'static,
    {
        self.lock().behaviors.insert(key.into(), Arc::new(behavior));
    }

    /// Behavior for keys without a registered one. Without a fallback such runs fail.
    pub fn set_fallback_behavior<F>(&self, behavior: F)
    where
        F: Fn(&BehaviorContext<'_>) -> BehaviorOutcome + Send + Sync + 'static,
    {
        self.lock().fallback = Some(Arc::new(behavior));
    }

    pub fn set_unavailable(&self, unavailable: bool) {
        self.lock().unavailable = unavailable;
    }

    pub fn set_fail_builds(&self, fail: bool) {
        self.lock().fail_builds = fail;
    }

    pub fn set_fail_runs(&self, fail: bool) {
        self.lock().fail_runs = fail;
    }

    /// Makes a running container exit with `code`.
    pub fn exit(&self, container_id: &str, code: i64) -> Result<(), EngineError> {
        let mut state = self.lock();
        let c = state
            .containers
            .get_mut(container_id)
            .ok_or_else(|| EngineError::UnknownContainer(container_id.to_string()))?;
        c.state = ContainerState::Exited;
        c.exit_code = Some(code);
        Ok(())
    }

    /// Replaces the remaining health timeline of a container.
    pub fn set_health(&self, container_id: &str, timeline: Vec<bool>) -> Result<(), EngineError> {
        let mut state = self.lock();
        let c = state
            .containers
            .get_mut(container_id)
            .ok_or_else(|| EngineError::UnknownContainer(container_id.to_string()))?;
        c.health = timeline;
        c.polls = 0;
        Ok(())
    }

    pub fn calls(&self) -> Vec<EngineCall> {
        self.lock().calls.clone()
    }

    pub fn count(&self, name: &str) -> usize {
        self.lock().calls.iter().filter(|c| c.name() == name).count()
    }

    pub fn clear_calls(&self) {
        self.lock().calls.clear();
    }

    /// Ids of containers that exist (any state).
    pub fn containers(&self) -> Vec<String> {
        self.lock().containers.keys().cloned().collect()
    }

    fn check_available(state: &State) -> Result<(), EngineError> {
        if state.unavailable {
            Err(EngineError::Unavailable("simulated outage".into()))
        } else {
            Ok(())
        }
    }
}

impl ContainerEngine for SimulatedEngine {
    fn build(&self, context: &ContextTree, tag: &str) -> Result<String, EngineError> {
        let mut state = self.lock();
        let context_hash = tree_hash(context.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
        state.calls.push(EngineCall::Build {
            tag: tag.to_string(),
            context_hash: context_hash.clone(),
        });
        Self::check_available(&state)?;
        if state.fail_builds {
            return Err(EngineError::BuildFailed("injected build failure".into()));
        }
        let containerfile = context
            .get(CONTAINERFILE)
            .ok_or_else(|| EngineError::BuildFailed("context has no Containerfile".into()))?;
        if first_instruction(containerfile).as_deref() != Some("FROM") {
            return Err(EngineError::BuildFailed("first instruction must be FROM".into()));
        }
        let image_id = format!("sha256:{}", hex::encode(Sha256::digest(format!("sim-image\n{context_hash}"))));
        state.images.insert(image_id.clone(), context_hash);
        Ok(image_id)
    }

    fn pull(&self, image: &str) -> Result<String, EngineError> {
        let mut state = self.lock();
        state.calls.push(EngineCall::Pull { image: image.to_string() });
        Self::check_available(&state)?;
        let image_id = format!("sha256:{}", hex::encode(Sha256::digest(format!("sim-pull\n{image}"))));
        state.images.insert(image_id.clone(), image.to_string());
        Ok(image_id)
    }

    fn run(
        &self,
        image_id: &str,
        env: &BTreeMap<String, String>,
        _labels: &BTreeMap<String, String>,
    ) -> Result<String, EngineError> {
        let behavior = {
            let mut state = self.lock();
            state.next_container += 1;
            let container_id = format!("sim-c-{:06}", state.next_container);
            state.calls.push(EngineCall::Run {
                image_id: image_id.to_string(),
                container_id: container_id.clone(),
                env: env.clone(),
            });
            Self::check_available(&state)?;
            if state.fail_runs {
                return Err(EngineError::RunFailed("injected run failure".into()));
            }
            let key = state
                .images
                .get(image_id)
                .cloned()
                .ok_or_else(|| EngineError::UnknownImage(image_id.to_string()))?;
            let behavior = state
                .behaviors
                .get(&key)
                .or(state.fallback.as_ref())
                .cloned()
                .ok_or_else(|| EngineError::UnregisteredBehavior(key.clone()))?;
            state.containers.insert(
                container_id.clone(),
                Container {
                    state: ContainerState::Running,
                    exit_code: None,
                    health: Vec::new(),
                    polls: 0,
                },
            );
            (container_id, behavior)
        };
        // The behavior calls back into the runtime API, so no engine lock is held here.
        let (container_id, behavior) = behavior;
        let api = self.api.lock().unwrap_or_else(|e| e.into_inner()).clone();
        let outcome = match &api {
            Some(api) => behavior(&BehaviorContext { env, api: api.as_ref() }),
            None => behavior(&BehaviorContext { env, api: &NoApi }),
        };
        let mut state = self.lock();
        if let Some(c) = state.containers.get_mut(&container_id) {
            c.health = outcome.health;
            if let Some(code) = outcome.exit_code {
                c.state = ContainerState::Exited;
                c.exit_code = Some(code);
            }
        }
        Ok(container_id)
    }

    fn stop(&self, container_id: &str, _grace: Duration) -> Result<(), EngineError> {
        let mut state = self.lock();
        state.calls.push(EngineCall::Stop {
            container_id: container_id.to_string(),
        });
        Self::check_available(&state)?;
        let c = state
            .containers
            .get_mut(container_id)
            .ok_or_else(|| EngineError::UnknownContainer(container_id.to_string()))?;
        if c.state != ContainerState::Exited {
            c.state = ContainerState::Exited;
            c.exit_code = Some(143);
        }
        Ok(())
    }

    fn remove(&self, container_id: &str) -> Result<(), EngineError> {
        let mut state = self.lock();
        state.calls.push(EngineCall::Remove {
            container_id: container_id.to_string(),
        });
        Self::check_available(&state)?;
        match state.containers.get(container_id) {
            None => Err(EngineError::UnknownContainer(container_id.to_string())),
            Some(c) if c.state == ContainerState::Running => {
                Err(EngineError::Other(format!("container {container_id} is running")))
            }
            Some(_) => {
                state.containers.remove(container_id);
                Ok(())
            }
        }
    }

    fn inspect(&self, container_id: &str) -> Result<ContainerStatus, EngineError> {
        let mut state = self.lock();
        state.calls.push(EngineCall::Inspect {
            container_id: container_id.to_string(),
        });
        Self::check_available(&state)?;
        state
            .containers
            .get(container_id)
            .map(|c| ContainerStatus {
                state: c.state,
                exit_code: c.exit_code,
            })
            .ok_or_else(|| EngineError::UnknownContainer(container_id.to_string()))
    }

    fn health(&self, container_id: &str) -> Result<HealthStatus, EngineError> {
        let mut state = self.lock();
        state.calls.push(EngineCall::Health {
            container_id: container_id.to_string(),
        });
        Self::check_available(&state)?;
        let c = state
            .containers
            .get_mut(container_id)
            .ok_or_else(|| EngineError::UnknownContainer(container_id.to_string()))?;
        let Some(last) = c.health.last().copied() else {
            return Ok(HealthStatus::Unsupported);
        };
        let healthy = c.health.get(c.polls).copied().unwrap_or(last);
        c.polls += 1;
        Ok(if healthy {
            HealthStatus::Healthy
        } else {
            HealthStatus::Unhealthy
        })
    }
}

//! Container engine backed by a Docker-Engine-compatible daemon.
//!
//! The orchestrator drives engines synchronously, so [`DockerEngine`] owns a
//! small tokio runtime and blocks on each request. Call it from plain threads
//! or `spawn_blocking`, never from inside an async task.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Duration;

use aasrt_core::context_store::ContextTree;
use aasrt_core::engine::{ContainerEngine, ContainerState, ContainerStatus, EngineError, HealthStatus};
use aasrt_core::package::CONTAINERFILE;
use bollard::errors::Error as DockerError;
use bollard::models::{ContainerCreateBody, ContainerInspectResponse, ContainerStateStatusEnum, HealthStatusEnum, HostConfig};
use bollard::query_parameters::{
    BuildImageOptionsBuilder, CreateImageOptionsBuilder, RemoveContainerOptionsBuilder, StopContainerOptionsBuilder,
};
use bollard::{Docker, API_DEFAULT_VERSION};
use futures_util::StreamExt;

pub const DEFAULT_SOCKET: &str = "unix:///var/run/docker.sock";

/// Request timeout in seconds. Image builds can be slow.
const REQUEST_TIMEOUT: u64 = 600;

/// Where the daemon listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    /// `host:port`, spoken as plain HTTP.
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid engine endpoint {0:?}: expected unix:///path, an absolute socket path, tcp://host:port or http://host:port")]
pub struct EndpointError(pub String);

impl Endpoint {
    pub fn parse(raw: &str) -> Result<Self, EndpointError> {
        let bad = || EndpointError(raw.to_string());
        if let Some(path) = raw.strip_prefix("unix://") {
            return if path.starts_with('/') && path.len() > 1 {
                Ok(Endpoint::Unix(path.into()))
            } else {
                Err(bad())
            };
        }
        if raw.starts_with('/') && raw.len() > 1 {
            return Ok(Endpoint::Unix(raw.into()));
        }
        let authority = raw
            .strip_prefix("tcp://")
            .or_else(|| raw.strip_prefix("http://"))
            .ok_or_else(bad)?
            .trim_end_matches('/');
        let (host, port) = authority.rsplit_once(':').ok_or_else(bad)?;
        if host.is_empty() || host.contains('/') || port.parse::<u16>().is_err() {
            return Err(bad());
        }
        Ok(Endpoint::Tcp(authority.to_string()))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix://{}", p.display()),
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DockerOptions {
    /// `host:ip` entries added to every container, e.g. `host.docker.internal:host-gateway`
    /// so services can reach a runtime listening on the host.
    pub extra_hosts: Vec<String>,
    /// Network mode for service containers; daemon default when unset.
    pub network_mode: Option<String>,
}

pub struct DockerEngine {
    client: Docker,
    rt: tokio::runtime::Runtime,
    options: DockerOptions,
}

impl DockerEngine {
    /// Creates a client. A missing socket file fails here; the daemon itself
    /// is not contacted until the first call.
    pub fn connect(endpoint: &Endpoint, options: DockerOptions) -> Result<Self, EngineError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .thread_name("aasrt-docker")
            .enable_all()
            .build()
            .map_err(|e| EngineError::Other(e.to_string()))?;
        // The hyper connectors register with the ambient runtime.
        let _guard = rt.enter();
        let client = match endpoint {
            Endpoint::Unix(path) => {
                Docker::connect_with_socket(&path.to_string_lossy(), REQUEST_TIMEOUT, API_DEFAULT_VERSION)
            }
            Endpoint::Tcp(addr) => Docker::connect_with_http(addr, REQUEST_TIMEOUT, API_DEFAULT_VERSION),
        }
        .map_err(|e| EngineError::Unavailable(e.to_string()))?;
        drop(_guard);
        Ok(Self { client, rt, options })
    }

    /// Round-trips `/_ping`.
    pub fn ping(&self) -> Result<(), EngineError> {
        self.rt.block_on(self.client.ping()).map(|_| ()).map_err(classify)
    }
}

/// Serializes a context tree as an uncompressed tar stream with fixed metadata,
/// so identical trees always upload identical bytes.
pub fn context_tar(tree: &ContextTree) -> std::io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    builder.mode(tar::HeaderMode::Deterministic);
    for (path, content) in tree {
        let mut header = tar::Header::new_gnu();
        header.set_size(content.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, path, content.as_slice())?;
    }
    builder.into_inner()
}

fn classify(err: DockerError) -> EngineError {
    match err {
        DockerError::DockerResponseServerError { status_code: 404, message } => {
            EngineError::UnknownContainer(message)
        }
        DockerError::DockerResponseServerError { status_code, message } => {
            EngineError::Other(format!("daemon returned {status_code}: {message}"))
        }
        other => EngineError::Unavailable(other.to_string()),
    }
}

/// Maps inspect output onto the engine-neutral status.
pub fn container_status(inspect: &ContainerInspectResponse) -> ContainerStatus {
    let state = inspect.state.as_ref();
    let status = state.and_then(|s| s.status);
    let state_kind = match status {
        Some(ContainerStateStatusEnum::CREATED) => ContainerState::Created,
        Some(
            ContainerStateStatusEnum::RUNNING | ContainerStateStatusEnum::PAUSED | ContainerStateStatusEnum::RESTARTING,
        ) => ContainerState::Running,
        Some(_) => ContainerState::Exited,
        None if state.and_then(|s| s.running) == Some(true) => ContainerState::Running,
        None => ContainerState::Exited,
    };
    ContainerStatus {
        state: state_kind,
        exit_code: match state_kind {
            ContainerState::Exited => state.and_then(|s| s.exit_code),
            _ => None,
        },
    }
}

/// Maps the daemon's health state. A container still in its start period counts as healthy.
pub fn health_status(inspect: &ContainerInspectResponse) -> HealthStatus {
    match inspect.state.as_ref().and_then(|s| s.health.as_ref()).and_then(|h| h.status) {
        Some(HealthStatusEnum::HEALTHY | HealthStatusEnum::STARTING) => HealthStatus::Healthy,
        Some(HealthStatusEnum::UNHEALTHY) => HealthStatus::Unhealthy,
        _ => HealthStatus::Unsupported,
    }
}

impl ContainerEngine for DockerEngine {
    fn build(&self, context: &ContextTree, tag: &str) -> Result<String, EngineError> {
        let body = context_tar(context).map_err(|e| EngineError::BuildFailed(e.to_string()))?;
        let options = BuildImageOptionsBuilder::new()
            .dockerfile(CONTAINERFILE)
            .t(tag)
            .rm(true)
            .forcerm(true)
            .build();
        self.rt.block_on(async {
            let mut stream = self
                .client
                .build_image(options, None, Some(bollard::body_full(body.into())));
            let mut image_id = None;
            while let Some(item) = stream.next().await {
                let info = item.map_err(|e| match classify(e) {
                    EngineError::Other(m) => EngineError::BuildFailed(m),
                    other => other,
                })?;
                if let Some(detail) = info.error_detail.and_then(|d| d.message) {
                    return Err(EngineError::BuildFailed(detail));
                }
                if let Some(line) = info.stream.as_deref().map(str::trim_end).filter(|l| !l.is_empty()) {
                    tracing::debug!(target: "aasrt::docker", tag, "{line}");
                }
                if let Some(id) = info.aux.and_then(|a| a.id) {
                    image_id = Some(id);
                }
            }
            match image_id {
                Some(id) => Ok(id),
                None => self
                    .client
                    .inspect_image(tag)
                    .await
                    .map_err(|e| EngineError::BuildFailed(e.to_string()))?
                    .id
                    .ok_or_else(|| EngineError::BuildFailed(format!("daemon reported no id for {tag}"))),
            }
        })
    }

    fn pull(&self, image: &str) -> Result<String, EngineError> {
        self.rt.block_on(async {
            if let Ok(found) = self.client.inspect_image(image).await {
                if let Some(id) = found.id {
                    return Ok(id);
                }
            }
            let options = CreateImageOptionsBuilder::new().from_image(image).build();
            let mut stream = self.client.create_image(Some(options), None, None);
            while let Some(item) = stream.next().await {
                let info = item.map_err(|e| match classify(e) {
                    EngineError::Other(m) | EngineError::UnknownContainer(m) => EngineError::UnknownImage(m),
                    other => other,
                })?;
                if let Some(detail) = info.error_detail.and_then(|d| d.message) {
                    return Err(EngineError::UnknownImage(detail));
                }
            }
            self.client
                .inspect_image(image)
                .await
                .map_err(|e| EngineError::UnknownImage(e.to_string()))?
                .id
                .ok_or_else(|| EngineError::UnknownImage(image.to_string()))
        })
    }

    fn run(
        &self,
        image_id: &str,
        env: &BTreeMap<String, String>,
        labels: &BTreeMap<String, String>,
    ) -> Result<String, EngineError> {
        let host_config = HostConfig {
            extra_hosts: (!self.options.extra_hosts.is_empty()).then(|| self.options.extra_hosts.clone()),
            network_mode: self.options.network_mode.clone(),
            ..Default::default()
        };
        let body = ContainerCreateBody {
            image: Some(image_id.to_string()),
            env: Some(env.iter().map(|(k, v)| format!("{k}={v}")).collect()),
            labels: Some(labels.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<HashMap<_, _>>()),
            host_config: Some(host_config),
            ..Default::default()
        };
        self.rt.block_on(async {
            let created = self
                .client
                .create_container(None::<bollard::query_parameters::CreateContainerOptions>, body)
                .await
                .map_err(|e| match classify(e) {
                    EngineError::Unavailable(m) => EngineError::Unavailable(m),
                    other => EngineError::RunFailed(other.to_string()),
                })?;
            if let Err(e) = self.client.start_container(&created.id, None).await {
                // Leave nothing behind when start fails.
                let force = RemoveContainerOptionsBuilder::new().force(true).build();
                let _ = self.client.remove_container(&created.id, Some(force)).await;
                return Err(match classify(e) {
                    EngineError::Unavailable(m) => EngineError::Unavailable(m),
                    other => EngineError::RunFailed(other.to_string()),
                });
            }
            Ok(created.id)
        })
    }

    fn stop(&self, container_id: &str, grace: Duration) -> Result<(), EngineError> {
        let secs = i32::try_from(grace.as_secs() + u64::from(grace.subsec_nanos() > 0)).unwrap_or(i32::MAX);
        let options = StopContainerOptionsBuilder::new().t(secs).build();
        match self.rt.block_on(self.client.stop_container(container_id, Some(options))) {
            // 304: already stopped.
            Err(DockerError::DockerResponseServerError { status_code: 304, .. }) => Ok(()),
            other => other.map_err(classify),
        }
    }

    fn remove(&self, container_id: &str) -> Result<(), EngineError> {
        let options = RemoveContainerOptionsBuilder::new().force(true).v(true).build();
        self.rt
            .block_on(self.client.remove_container(container_id, Some(options)))
            .map_err(classify)
    }

    fn inspect(&self, container_id: &str) -> Result<ContainerStatus, EngineError> {
        self.rt
            .block_on(self.client.inspect_container(container_id, None))
            .map(|i| container_status(&i))
            .map_err(classify)
    }

    fn health(&self, container_id: &str) -> Result<HealthStatus, EngineError> {
        self.rt
            .block_on(self.client.inspect_container(container_id, None))
            .map(|i| health_status(&i))
            .map_err(classify)
    }
}

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use aasrt_core::case_study;
use aasrt_core::clock::SystemClock;
use aasrt_core::engine::{BehaviorOutcome, ContainerEngine, SimulatedEngine};
use aasrt_core::instance::InstanceId;
use aasrt_core::orchestrator::OrchestratorConfig;
use aasrt_core::runtime::{Runtime, RuntimeOptions};
use aasrt_docker::{DockerEngine, DockerOptions};
use aasrt_server::ServerConfig;
use serde_json::json;

use crate::config::{ensure_writable, EngineChoice, ServeConfig};
use crate::output::{Failure, Printer};

/// Host name under which containers reach a runtime on the daemon's host.
const DOCKER_HOST_ALIAS: &str = "host.docker.internal";

/// A simulated engine that runs the case-study service in-process. Any other
/// context starts and keeps running until it is stopped.
fn simulated_engine() -> SimulatedEngine {
    let engine = SimulatedEngine::new();
    engine.register_behavior(case_study::build_context().content_hash, |ctx| case_study::geometry_behavior(ctx, None));
    engine.set_fallback_behavior(|_| BehaviorOutcome::running(vec![]));
    engine
}

fn default_api_base(engine: &EngineChoice, local: SocketAddr) -> String {
    match engine {
        EngineChoice::Docker(_) => format!("http://{DOCKER_HOST_ALIAS}:{}", local.port()),
        EngineChoice::Simulated if local.ip().is_unspecified() => format!("http://127.0.0.1:{}", local.port()),
        EngineChoice::Simulated => format!("http://{local}"),
    }
}

#[cfg(unix)]
type Terminate = tokio::signal::unix::Signal;
#[cfg(not(unix))]
type Terminate = ();

fn terminate_signal() -> std::io::Result<Terminate> {
    #[cfg(unix)]
    return tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate());
    #[cfg(not(unix))]
    Ok(())
}

#[allow(unused_mut, unused_variables)]
async fn wait_for_signal(mut term: Terminate) {
    #[cfg(unix)]
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

pub fn serve(printer: Printer, config: ServeConfig) -> Result<(), Failure> {
    ensure_writable(&config.store)?;
    let (engine, simulated): (Arc<dyn ContainerEngine>, Option<SimulatedEngine>) = match &config.engine {
        EngineChoice::Simulated => {
            let engine = simulated_engine();
            (Arc::new(engine.clone()), Some(engine))
        }
        EngineChoice::Docker(endpoint) => {
            let options = DockerOptions {
                extra_hosts: vec![format!("{DOCKER_HOST_ALIAS}:host-gateway")],
                network_mode: None,
            };
            let docker = DockerEngine::connect(endpoint, options)
                .map_err(|e| Failure::network("EngineUnreachable", format!("{endpoint}: {e}")))?;
            docker
                .ping()
                .map_err(|e| Failure::network("EngineUnreachable", format!("{endpoint}: {e}")))?;
            (Arc::new(docker), None)
        }
    };

    let tokio_rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::config("RuntimeSetup", e.to_string()))?;
    tokio_rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|e| Failure::config("BindFailed", format!("{}: {e}", config.listen)))?;
        let local = listener.local_addr().map_err(|e| Failure::config("BindFailed", e.to_string()))?;
        let api_base = config.api_base.clone().unwrap_or_else(|| default_api_base(&config.engine, local));
        let mut runtime_env = BTreeMap::new();
        if let Some(token) = &config.token {
            runtime_env.insert("AAS_API_TOKEN".to_string(), token.clone());
        }
        let options = RuntimeOptions {
            orchestrator: OrchestratorConfig {
                api_base: api_base.clone(),
                stop_grace: config.stop_grace,
                runtime_env,
            },
            record_events: false,
        };
        let store = config.store.clone();
        let runtime = tokio::task::spawn_blocking(move || Runtime::open_dir(&store, engine, Arc::new(SystemClock), options))
            .await
            .expect("runtime setup does not panic")
            .map_err(|e| Failure::config("StoreUnusable", format!("{}: {e}", config.store.display())))?;
        let runtime = Arc::new(runtime);
        if let Some(engine) = &simulated {
            engine.attach_api(Arc::new(runtime.service_api()));
        }

        // Installed before announcing the address so an early SIGTERM is not fatal.
        let term = terminate_signal().map_err(|e| Failure::config("SignalSetup", e.to_string()))?;
        let running_at_signal: Arc<Mutex<Vec<InstanceId>>> = Arc::default();
        let shutdown = {
            let runtime = runtime.clone();
            let running_at_signal = running_at_signal.clone();
            async move {
                wait_for_signal(term).await;
                tracing::info!("shutting down");
                let running = runtime.instances().into_iter().filter(|i| i.is_running()).map(|i| i.instance_id);
                *running_at_signal.lock().unwrap() = running.collect();
            }
        };

        let engine_name = match &config.engine {
            EngineChoice::Simulated => "simulated".to_string(),
            EngineChoice::Docker(endpoint) => endpoint.to_string(),
        };
        printer.emit(
            json!({"event": "listening", "address": local.to_string(), "apiBase": api_base, "engine": engine_name}),
            || format!("listening on http://{local} (engine {engine_name}, store {})", config.store.display()),
        );
        let server_config = ServerConfig {
            token: config.token.clone(),
            ..Default::default()
        };
        aasrt_server::serve(listener, runtime.clone(), server_config, shutdown)
            .await
            .map_err(|e| Failure::network("ServeFailed", e.to_string()))?;

        let ids = std::mem::take(&mut *running_at_signal.lock().unwrap());
        let stopped: Vec<_> = ids
            .iter()
            .filter_map(|id| runtime.instance(id))
            .map(|i| json!({"instanceId": i.instance_id, "serviceId": i.spec.service_id, "state": i.state}))
            .collect();
        printer.emit(json!({"event": "stopped", "stopped": stopped}), || {
            format!("stopped {} running instance(s)", stopped.len())
        });
        Ok(())
    })
}

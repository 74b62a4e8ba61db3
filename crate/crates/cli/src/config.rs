//! Settings resolve in the order flags, `AASRT_*` environment variables
//! (both handled by clap), config file, built-in defaults.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use aasrt_core::orchestrator::DEFAULT_STOP_GRACE;
use aasrt_docker::{Endpoint, DEFAULT_SOCKET};
use serde::Deserialize;

use crate::output::Failure;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_STORE: &str = "aasrt-data";
pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";
pub const DEFAULT_LOG_LEVEL: &str = "info";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub listen: Option<String>,
    pub store: Option<PathBuf>,
    pub engine: Option<String>,
    pub engine_endpoint: Option<String>,
    pub api_base: Option<String>,
    pub token: Option<String>,
    pub stop_grace_secs: Option<f64>,
    pub log_level: Option<String>,
    pub server: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config("ConfigUnreadable", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config("ConfigInvalid", format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineChoice {
    Simulated,
    Docker(Endpoint),
}

#[derive(Debug, Default)]
pub struct ServeFlags {
    pub listen: Option<String>,
    pub store: Option<PathBuf>,
    pub engine: Option<String>,
    pub engine_endpoint: Option<String>,
    pub api_base: Option<String>,
    pub token: Option<String>,
    pub stop_grace: Option<f64>,
}

#[derive(Debug)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub store: PathBuf,
    pub engine: EngineChoice,
    pub api_base: Option<String>,
    pub token: Option<String>,
    pub stop_grace: Duration,
}

impl ServeConfig {
    pub fn resolve(flags: ServeFlags, file: &FileConfig) -> Result<Self, Failure> {
        let listen = flags.listen.or(file.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.into());
        let listen = listen
            .parse()
            .map_err(|_| Failure::config("InvalidListen", format!("invalid listen address {listen:?}, expected host:port")))?;
        let store = flags.store.or(file.store.clone()).unwrap_or_else(|| DEFAULT_STORE.into());
        let engine = match flags.engine.or(file.engine.clone()).as_deref().unwrap_or("docker") {
            "simulated" => EngineChoice::Simulated,
            "docker" => {
                let raw = flags
                    .engine_endpoint
                    .or(file.engine_endpoint.clone())
                    .unwrap_or_else(|| DEFAULT_SOCKET.into());
                EngineChoice::Docker(
                    Endpoint::parse(&raw).map_err(|e| Failure::config("InvalidEngineEndpoint", e.to_string()))?,
                )
            }
            other => {
                return Err(Failure::config(
                    "InvalidEngine",
                    format!("unknown engine {other:?}, expected docker or simulated"),
                ))
            }
        };
        let api_base = flags.api_base.or(file.api_base.clone());
        if let Some(base) = &api_base {
            check_http_url(base)?;
        }
        let stop_grace = match flags.stop_grace.or(file.stop_grace_secs) {
            None => DEFAULT_STOP_GRACE,
            Some(s) => Duration::try_from_secs_f64(s)
                .map_err(|_| Failure::config("InvalidStopGrace", format!("stop grace must be a non-negative number of seconds, got {s}")))?,
        };
        Ok(Self {
            listen,
            store,
            engine,
            api_base,
            token: flags.token.or(file.token.clone()),
            stop_grace,
        })
    }
}

pub fn resolve_server(flag: Option<String>, file: &FileConfig) -> Result<String, Failure> {
    let server = flag.or(file.server.clone()).unwrap_or_else(|| DEFAULT_SERVER.into());
    check_http_url(&server)?;
    Ok(server.trim_end_matches('/').to_string())
}

fn check_http_url(url: &str) -> Result<(), Failure> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| Failure::config("InvalidUrl", format!("{url:?} is not an http:// URL")))?;
    if rest.is_empty() || rest.starts_with('/') {
        return Err(Failure::config("InvalidUrl", format!("{url:?} has no host")));
    }
    Ok(())
}

/// The storage directory must exist (or be creatable) and accept writes.
pub fn ensure_writable(dir: &Path) -> Result<(), Failure> {
    let fail = |e: std::io::Error| Failure::config("StoreNotWritable", format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".aasrt-write-probe");
    std::fs::write(&probe, b"").map_err(fail)?;
    std::fs::remove_file(&probe).map_err(fail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::Exit;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("listen = \"127.0.0.1:9000\"\nengine = \"simulated\"\nstop_grace_secs = 2.5").unwrap();
        let from_file = ServeConfig::resolve(ServeFlags::default(), &file).unwrap();
        assert_eq!(from_file.listen.port(), 9000);
        assert_eq!(from_file.engine, EngineChoice::Simulated);
        assert_eq!(from_file.stop_grace, Duration::from_millis(2500));
        assert_eq!(from_file.store, PathBuf::from(DEFAULT_STORE));

        let flags = ServeFlags {
            listen: Some("0.0.0.0:1".into()),
            ..Default::default()
        };
        assert_eq!(ServeConfig::resolve(flags, &file).unwrap().listen.port(), 1);

        let defaults = ServeConfig::resolve(ServeFlags::default(), &FileConfig::default()).unwrap();
        assert_eq!(defaults.listen, DEFAULT_LISTEN.parse().unwrap());
        assert_eq!(defaults.engine, EngineChoice::Docker(Endpoint::parse(DEFAULT_SOCKET).unwrap()));
        assert_eq!(defaults.stop_grace, DEFAULT_STOP_GRACE);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cases = [
            ServeFlags { listen: Some("localhost".into()), ..Default::default() },
            ServeFlags { engine: Some("podman".into()), ..Default::default() },
            ServeFlags { engine_endpoint: Some("ftp://x".into()), ..Default::default() },
            ServeFlags { stop_grace: Some(-1.0), ..Default::default() },
            ServeFlags { api_base: Some("host:80".into()), ..Default::default() },
        ];
        for flags in cases {
            let err = ServeConfig::resolve(flags, &FileConfig::default()).unwrap_err();
            assert_eq!(err.exit, Exit::Config, "{err:?}");
        }
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
    }

    #[test]
    fn server_urls() {
        let file = FileConfig::default();
        assert_eq!(resolve_server(None, &file).unwrap(), DEFAULT_SERVER);
        assert_eq!(resolve_server(Some("http://h:1/".into()), &file).unwrap(), "http://h:1");
        assert!(resolve_server(Some("https://h".into()), &file).is_err());
        assert!(resolve_server(Some("http://".into()), &file).is_err());
    }
}

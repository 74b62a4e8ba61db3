use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use aasrt_core::case_study;
use aasrt_core::model::{AasId, IdShort};
use aasrt_core::package::{write_package, AasxPackage, ServiceContextEntry};
use aasrt_core::service_execution::{ContextRef, ExecutionTrigger, ServiceExecutionSpec};
use serde_json::{json, Value};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture_dir() -> PathBuf {
    workspace().join("fixtures/osaca-milling")
}

fn fixture_archive() -> PathBuf {
    workspace().join("fixtures/osaca-milling.aasx")
}

fn aasrt() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aasrt"));
    for (key, _) in std::env::vars() {
        if key.starts_with("AASRT_") {
            cmd.env_remove(key);
        }
    }
    cmd.env("AASRT_LOG_LEVEL", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    aasrt().args(args).output().unwrap()
}

fn schema() -> &'static jsonschema::JSONSchema {
    static SCHEMA: OnceLock<jsonschema::JSONSchema> = OnceLock::new();
    SCHEMA.get_or_init(|| {
        let text = std::fs::read_to_string(workspace().join("docs/cli-output.schema.json")).unwrap();
        jsonschema::JSONSchema::compile(&serde_json::from_str(&text).unwrap()).unwrap()
    })
}

/// Parses one `--json` line and checks it against the published schema.
fn conforming(line: &str) -> Value {
    let value: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"));
    if let Err(errors) = schema().validate(&value) {
        let errors: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("{line}\nviolates the schema: {errors:#?}");
    }
    value
}

fn json_output(out: &Output) -> Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected one JSON line, got {stdout:?}");
    conforming(lines[0])
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A minimal HTTP/1.1 exchange; the server closes the connection after answering.
fn http(addr: SocketAddr, method: &str, path: &str, body: Option<Value>, token: Option<&str>) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    write!(
        stream,
        "{method} /{path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n{auth}Content-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(rest)
    } else {
        rest.to_string()
    };
    (status, if body.is_empty() { Value::Null } else { serde_json::from_str(&body).unwrap() })
}

fn dechunk(mut rest: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, tail) = rest.split_once("\r\n").unwrap();
        let size = usize::from_str_radix(size.trim(), 16).unwrap();
        if size == 0 {
            return out;
        }
        out.push_str(&tail[..size]);
        rest = &tail[size + 2..];
    }
}

struct Server {
    child: Child,
    stdout: BufReader<ChildStdout>,
    addr: SocketAddr,
    _store: tempfile::TempDir,
}

impl Server {
    fn start(extra: &[&str]) -> Server {
        let store = tempfile::tempdir().unwrap();
        let mut child = aasrt()
            .args(["--json", "serve", "--engine", "simulated", "--listen", "127.0.0.1:0", "--store"])
            .arg(store.path())
            .args(extra)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        let listening = conforming(&line);
        assert_eq!(listening["event"], "listening");
        let addr = listening["address"].as_str().unwrap().parse().unwrap();
        Server {
            child,
            stdout,
            addr,
            _store: store,
        }
    }

    fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Sends SIGTERM and returns the exit code and the final JSON line.
    fn terminate(mut self) -> (i32, Value) {
        let status = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        assert!(status.success());
        let mut rest = String::new();
        self.stdout.read_to_string(&mut rest).unwrap();
        let deadline = Instant::now() + Duration::from_secs(20);
        let exit = loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                break status;
            }
            assert!(Instant::now() < deadline, "server did not exit");
            std::thread::sleep(Duration::from_millis(20));
        };
        let last = rest.lines().last().expect("a stopped line");
        (exit.code().unwrap(), conforming(last))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn closed_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_answers_healthz_and_stops_on_sigterm() {
    let server = Server::start(&[]);
    assert_eq!(http(server.addr, "GET", "healthz", None, None), (200, json!({"status": "ok"})));
    let (exit, stopped) = server.terminate();
    assert_eq!(exit, 0);
    assert_eq!(stopped, json!({"command": "serve", "event": "stopped", "stopped": []}));
}

#[test]
fn invalid_listen_is_a_config_error() {
    let store = tempfile::tempdir().unwrap();
    let out = run(&["serve", "--engine", "simulated", "--listen", "not-an-address", "--store", path_str(store.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid listen address"));

    let out = run(&["--json", "serve", "--engine", "simulated", "--listen", "300.0.0.1:80", "--store", path_str(store.path())]);
    assert_eq!(code(&out), 2);
    assert_eq!(json_output(&out)["error"]["code"], "InvalidListen");
}

#[test]
fn unreachable_engine_is_a_network_error() {
    let store = tempfile::tempdir().unwrap();
    let endpoint = format!("tcp://127.0.0.1:{}", closed_port());
    let out = run(&["--json", "serve", "--engine", "docker", "--engine-endpoint", &endpoint, "--store", path_str(store.path())]);
    assert_eq!(code(&out), 3);
    assert_eq!(json_output(&out)["error"]["code"], "EngineUnreachable");
}

#[test]
fn pack_reproduces_the_fixture_archive() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.aasx");
    let b = dir.path().join("b.aasx");
    for target in [&a, &b] {
        let out = run(&["--json", "pack", path_str(&fixture_dir()), "-o", path_str(target)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json_output(&out)["findings"], json!([]));
    }
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    assert_eq!(a, std::fs::read(fixture_archive()).unwrap());
    assert_eq!(aasrt_core::package::read_package(&a).unwrap(), case_study::build_case_study_package());
}

#[test]
fn pack_of_an_empty_directory_lacks_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--json", "pack", path_str(dir.path()), "-o", path_str(&dir.path().join("x.aasx"))]);
    assert_eq!(code(&out), 1);
    let error = &json_output(&out)["error"];
    assert_eq!((error["code"].as_str(), error["exitCode"].as_i64()), (Some("MissingManifest"), Some(1)));
    assert!(!dir.path().join("x.aasx").exists());
}

#[test]
fn pack_refuses_packages_with_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let unpacked = run(&["unpack", path_str(&fixture_archive()), "-o", path_str(&src)]);
    assert_eq!(code(&unpacked), 0);
    // Drop the build context the spec depends on.
    std::fs::remove_dir_all(src.join("aasx/services")).unwrap();
    let manifest = src.join("aasx/manifest.xml");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("services/")).collect();
    std::fs::write(&manifest, kept.join("\n")).unwrap();

    let out = run(&["--json", "pack", path_str(&src), "-o", path_str(&dir.path().join("x.aasx"))]);
    let value = json_output(&out);
    assert_eq!(code(&out), 1, "{value}");
    assert!(value["error"]["details"].as_array().is_some_and(|f| !f.is_empty()), "{value}");
}

#[test]
fn unpack_then_pack_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("tree");
    let out = run(&["--json", "unpack", path_str(&fixture_archive()), "-o", path_str(&src)]);
    assert_eq!(code(&out), 0);
    assert!(json_output(&out)["entries"].as_array().unwrap().contains(&json!("aasx/manifest.xml")));
    let repacked = dir.path().join("again.aasx");
    assert_eq!(code(&run(&["pack", path_str(&src), "-o", path_str(&repacked)])), 0);
    assert_eq!(std::fs::read(repacked).unwrap(), std::fs::read(fixture_archive()).unwrap());

    // A non-empty target is left alone.
    let again = run(&["--json", "unpack", path_str(&fixture_archive()), "-o", path_str(&src)]);
    assert_eq!(code(&again), 2);
    assert_eq!(json_output(&again)["error"]["code"], "OutputNotEmpty");
}

#[test]
fn validate_fixture_and_corrupt_archive() {
    let out = run(&["--json", "validate", path_str(&fixture_archive())]);
    assert_eq!(code(&out), 0);
    let report = json_output(&out);
    assert_eq!((report["valid"].as_bool(), &report["findings"]), (Some(true), &json!([])));

    let dir = tempfile::tempdir().unwrap();
    let corrupt = dir.path().join("corrupt.aasx");
    let mut bytes = std::fs::read(fixture_archive()).unwrap();
    bytes.truncate(bytes.len() / 3);
    std::fs::write(&corrupt, bytes).unwrap();
    let out = run(&["--json", "validate", path_str(&corrupt)]);
    assert_eq!(code(&out), 1);
    assert_eq!(json_output(&out)["error"]["code"], "NotAZip");
    let text = run(&["validate", path_str(&corrupt)]);
    assert_eq!(code(&text), 1);
    assert!(String::from_utf8_lossy(&text.stderr).contains("NotAZip"));

    let missing = run(&["validate", path_str(&dir.path().join("absent.aasx"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn remote_commands_against_a_stopped_server() {
    let server = format!("http://127.0.0.1:{}", closed_port());
    for args in [
        vec!["--json", "import", path_str(&fixture_archive()), "--server", &server],
        vec!["--json", "instances", "--server", &server],
        vec!["--json", "gc", "--server", &server],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 3, "{args:?}");
        assert_eq!(json_output(&out)["error"]["code"], "Unreachable");
    }
    let text = run(&["import", path_str(&fixture_archive()), "--server", &server]);
    assert_eq!(code(&text), 3);
    assert!(String::from_utf8_lossy(&text.stderr).contains("Unreachable"));
}

#[test]
fn case_study_through_the_cli() {
    let server = Server::start(&[]);
    let out = run(&["--json", "import", path_str(&fixture_archive()), "--server", &server.url()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report = &json_output(&out)["report"];
    assert_eq!(report["services"], json!(["geometry_correction"]));
    assert_eq!(report["activations"], json!([]));

    let cps = case_study::cps_position();
    for (axis, v) in [("X", 100.0), ("Y", 50.0), ("Z", 25.0)] {
        let path = cps.child(IdShort::new(axis).unwrap()).canonical_path();
        assert_eq!(http(server.addr, "PATCH", &path, Some(json!({"value": v})), None).0, 200);
    }
    let sim = case_study::simulation_position();
    let read = |axis: &str| {
        let path = sim.child(IdShort::new(axis).unwrap()).canonical_path();
        http(server.addr, "GET", &path, None, None).1["value"].as_f64().unwrap()
    };
    let deadline = Instant::now() + Duration::from_secs(10);
    while (read("Z") - 25.005).abs() > 1e-9 {
        assert!(Instant::now() < deadline, "simulation position never settled");
        std::thread::sleep(Duration::from_millis(20));
    }
    for (axis, expected) in [("X", 100.02), ("Y", 49.99), ("Z", 25.005)] {
        assert!((read(axis) - expected).abs() <= 1e-9);
    }

    let out = run(&["--json", "instances", "--server", &server.url()]);
    assert_eq!(code(&out), 0);
    let instances = json_output(&out)["instances"].as_array().unwrap().clone();
    assert!(!instances.is_empty());
    assert!(instances.iter().all(|i| i["cause"]["payload"]["kind"] == "Update"));
    let table = run(&["instances", "--server", &server.url()]);
    let table = String::from_utf8(table.stdout).unwrap();
    assert!(table.starts_with("INSTANCE"));
    assert_eq!(table.lines().count(), instances.len() + 1);

    let out = run(&["--json", "gc", "--server", &server.url()]);
    assert_eq!((code(&out), &json_output(&out)["removed"]), (0, &json!([])));

    // A second import is rejected as a whole.
    let dup = run(&["--json", "import", path_str(&fixture_archive()), "--server", &server.url()]);
    assert_eq!(code(&dup), 1);
    assert_eq!(json_output(&dup)["error"]["code"], "Conflict");
    assert_eq!(server.terminate().0, 0);
}

/// One submodel and an onInitialize service whose context has no scripted
/// behavior, so the simulated engine keeps it running.
fn long_running_package(dir: &Path) -> PathBuf {
    let ctx = ServiceContextEntry::new(IdShort::new("daemon").unwrap(), "1.0.0", b"FROM scratch\n".to_vec(), BTreeMap::new());
    let spec = ServiceExecutionSpec::new(
        IdShort::new("daemon").unwrap(),
        ContextRef::Package {
            service_ref: IdShort::new("daemon").unwrap(),
            content_hash: None,
        },
        [ExecutionTrigger::OnInitialize],
    );
    let mut pkg = AasxPackage::new();
    pkg.add_submodel(spec.to_submodel(AasId::new("urn:t:daemon-spec").unwrap(), IdShort::new("Daemon").unwrap()));
    pkg.add_service(ctx);
    let path = dir.join("daemon.aasx");
    std::fs::write(&path, write_package(&pkg).unwrap()).unwrap();
    path
}

#[test]
fn sigterm_stops_running_instances_before_exit() {
    let dir = tempfile::tempdir().unwrap();
    let archive = long_running_package(dir.path());
    let server = Server::start(&[]);
    let out = run(&["--json", "import", path_str(&archive), "--server", &server.url()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let activations = json_output(&out)["report"]["activations"].clone();
    assert_eq!(activations.as_array().unwrap().len(), 1);
    let instance = activations[0]["instanceId"].clone();
    let (_, list) = http(server.addr, "GET", "instances", None, None);
    assert_eq!(list[0]["state"], json!({"state": "Running"}));

    let (exit, stopped) = server.terminate();
    assert_eq!(exit, 0);
    assert_eq!(
        stopped["stopped"],
        json!([{
            "instanceId": instance,
            "serviceId": "daemon",
            "state": {"state": "Terminated", "termination": {"reason": "OperatorStop"}}
        }])
    );
}

#[test]
fn token_is_required_when_configured() {
    let server = Server::start(&["--token", "s3cret"]);
    assert_eq!(http(server.addr, "GET", "healthz", None, None).0, 200);
    let out = run(&["--json", "instances", "--server", &server.url()]);
    assert_eq!(code(&out), 2);
    assert_eq!(json_output(&out)["error"]["code"], "Unauthorized");
    let out = aasrt().env("AASRT_TOKEN", "s3cret").args(["--json", "instances", "--server", &server.url()]).output().unwrap();
    assert_eq!((code(&out), &json_output(&out)["instances"]), (0, &json!([])));
}

#[test]
fn flags_override_environment_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("aasrt.toml");
    let unreachable = format!("tcp://127.0.0.1:{}", closed_port());
    std::fs::write(
        &config,
        format!("listen = \"127.0.0.1:0\"\nengine = \"docker\"\nengine_endpoint = \"{unreachable}\"\nstore = \"{}\"\n", path_str(&dir.path().join("store"))),
    )
    .unwrap();
    let cfg = path_str(&config);

    // The file alone selects the unreachable daemon.
    assert_eq!(code(&run(&["--config", cfg, "serve"])), 3);
    // The environment beats the file.
    let out = aasrt().env("AASRT_LISTEN", "bogus").args(["--json", "--config", cfg, "serve"]).output().unwrap();
    assert_eq!((code(&out), json_output(&out)["error"]["code"].as_str()), (2, Some("InvalidListen")));
    // A flag beats both: the simulated engine needs no daemon.
    let mut child = aasrt()
        .env("AASRT_ENGINE", "docker")
        .args(["--json", "--config", cfg, "serve", "--engine", "simulated"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _ = child.kill();
    let _ = child.wait();
    assert_eq!(conforming(&line)["engine"], "simulated");

    std::fs::write(&config, "colour = \"blue\"\n").unwrap();
    let out = run(&["--json", "--config", cfg, "validate", path_str(&fixture_archive())]);
    assert_eq!((code(&out), json_output(&out)["error"]["code"].as_str()), (2, Some("ConfigInvalid")));
    let out = run(&["--json", "--config", path_str(&dir.path().join("none.toml")), "validate", path_str(&fixture_archive())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let out = run(&["--json", "pack"]);
    assert_eq!(code(&out), 2);
    assert_eq!(json_output(&out)["error"]["code"], "Usage");
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--json", "--log-level", "=[", "validate", path_str(&fixture_archive())])), 2);
}

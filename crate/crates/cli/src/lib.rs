//! The `aasrt` operator tool: run the server, build and check packages, and
//! talk to a running server.

mod client;
mod config;
mod output;
mod package;
mod serve;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

pub use output::Exit;

use config::{resolve_server, FileConfig, ServeConfig, ServeFlags, DEFAULT_LOG_LEVEL};
use output::{Failure, Printer};

#[derive(Debug, Parser)]
#[command(name = "aasrt", version, about = "Runtime server for proactive Asset Administration Shells")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "AASRT_CONFIG")]
    config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `aasrt_core=debug`. Logs go to stderr.
    #[arg(long, global = true, env = "AASRT_LOG_LEVEL")]
    log_level: Option<String>,
    /// Print one JSON object per result line instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Remote {
    /// Base URL of a running server.
    #[arg(long, env = "AASRT_SERVER")]
    server: Option<String>,
    /// Bearer token for the server.
    #[arg(long, env = "AASRT_TOKEN")]
    token: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the API server until SIGINT or SIGTERM.
    Serve {
        /// Address to listen on, host:port.
        #[arg(long, env = "AASRT_LISTEN")]
        listen: Option<String>,
        /// Directory for submodels and build contexts.
        #[arg(long, env = "AASRT_STORE")]
        store: Option<PathBuf>,
        /// Container backend: `docker` or `simulated`.
        #[arg(long, env = "AASRT_ENGINE")]
        engine: Option<String>,
        /// Docker API endpoint: unix:///path, /path or tcp://host:port.
        #[arg(long, env = "AASRT_ENGINE_ENDPOINT")]
        engine_endpoint: Option<String>,
        /// Base URL handed to services as AAS_API_BASE.
        #[arg(long, env = "AASRT_API_BASE")]
        api_base: Option<String>,
        /// Require this bearer token on every route except /healthz.
        #[arg(long, env = "AASRT_TOKEN")]
        token: Option<String>,
        /// Seconds a container gets between stop and kill.
        #[arg(long, env = "AASRT_STOP_GRACE")]
        stop_grace: Option<f64>,
    },
    /// Build an AASX package from a source directory.
    Pack {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Extract a package into an empty directory.
    Unpack {
        file: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check a package and print its findings.
    Validate { file: PathBuf },
    /// Upload a package to a running server.
    Import {
        file: PathBuf,
        #[command(flatten)]
        remote: Remote,
    },
    /// List the instance table of a running server.
    Instances {
        #[command(flatten)]
        remote: Remote,
    },
    /// Delete build contexts no registered service refers to.
    Gc {
        #[command(flatten)]
        remote: Remote,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Serve { .. } => "serve",
            Command::Pack { .. } => "pack",
            Command::Unpack { .. } => "unpack",
            Command::Validate { .. } => "validate",
            Command::Import { .. } => "import",
            Command::Instances { .. } => "instances",
            Command::Gc { .. } => "gc",
        }
    }
}

fn init_logging(filter: &str) -> Result<(), Failure> {
    let filter = tracing_subscriber::EnvFilter::try_new(filter)
        .map_err(|e| Failure::config("InvalidLogLevel", format!("{filter:?}: {e}")))?;
    // A second init (tests calling `run` twice) keeps the first subscriber.
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Exit::Ok as i32;
        }
        Err(e) => {
            if args.iter().any(|a| a == "--json") {
                let printer = Printer { json: true, command: "usage" };
                printer.fail(&Failure::config("Usage", e.kind().to_string()));
            } else {
                let _ = e.print();
            }
            return Exit::Config as i32;
        }
    };
    let printer = Printer {
        json: cli.json,
        command: cli.command.name(),
    };
    match execute(cli, printer) {
        Ok(exit) => exit as i32,
        Err(failure) => {
            printer.fail(&failure);
            failure.exit as i32
        }
    }
}

fn execute(cli: Cli, printer: Printer) -> Result<Exit, Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let log_level = cli.log_level.or(file.log_level.clone());
    init_logging(log_level.as_deref().unwrap_or(DEFAULT_LOG_LEVEL))?;
    match cli.command {
        Command::Serve {
            listen,
            store,
            engine,
            engine_endpoint,
            api_base,
            token,
            stop_grace,
        } => {
            let flags = ServeFlags {
                listen,
                store,
                engine,
                engine_endpoint,
                api_base,
                token,
                stop_grace,
            };
            serve::serve(printer, ServeConfig::resolve(flags, &file)?)?;
        }
        Command::Pack { dir, output } => package::pack(printer, &dir, &output)?,
        Command::Unpack { file: archive, output } => package::unpack(printer, &archive, &output)?,
        Command::Validate { file: archive } => {
            if !package::validate(printer, &archive)? {
                return Ok(Exit::Validation);
            }
        }
        Command::Import { file: archive, remote } => {
            let bytes = std::fs::read(&archive)
                .map_err(|e| Failure::config("InputUnreadable", format!("{}: {e}", archive.display())))?;
            let report = connect(remote, &file)?.import(bytes)?;
            printer.emit(json!({"report": report}), || describe_import(&report));
        }
        Command::Instances { remote } => {
            let instances = connect(remote, &file)?.instances()?;
            printer.emit(json!({"instances": instances}), || instance_table(&instances));
        }
        Command::Gc { remote } => {
            let removed = connect(remote, &file)?.gc()?["removed"].take();
            printer.emit(json!({"removed": removed}), || {
                let count = removed.as_array().map_or(0, Vec::len);
                format!("removed {count} unreferenced build context(s)")
            });
        }
    }
    Ok(Exit::Ok)
}

fn connect(remote: Remote, file: &FileConfig) -> Result<client::Remote, Failure> {
    let server = resolve_server(remote.server, file)?;
    client::Remote::new(server, remote.token.or(file.token.clone()))
}

fn ids(value: &Value) -> String {
    let items: Vec<String> = value
        .as_array()
        .into_iter()
        .flatten()
        .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
        .collect();
    if items.is_empty() {
        "-".into()
    } else {
        items.join(", ")
    }
}

fn describe_import(report: &Value) -> String {
    let mut text = format!(
        "imported shells: {}\nsubmodels: {}\nservices: {}",
        ids(&report["shells"]),
        ids(&report["submodels"]),
        ids(&report["services"])
    );
    for ctx in report["contexts"].as_array().into_iter().flatten() {
        let state = if ctx["newlyStored"] == true { "stored" } else { "already stored" };
        text.push_str(&format!("\ncontext {} {} ({state})", ctx["serviceId"].as_str().unwrap_or("?"), ctx["contentHash"].as_str().unwrap_or("?")));
    }
    for a in report["activations"].as_array().into_iter().flatten() {
        text.push_str(&format!("\nstarted {} as {}", a["serviceId"].as_str().unwrap_or("?"), a["instanceId"].as_str().unwrap_or("?")));
    }
    for f in report["findings"].as_array().into_iter().flatten() {
        text.push_str(&format!("\n  {}", output::describe(f)));
    }
    text
}

fn instance_table(instances: &Value) -> String {
    let rows: Vec<[String; 5]> = instances
        .as_array()
        .into_iter()
        .flatten()
        .map(|i| {
            let text = |v: &Value| v.as_str().map_or_else(|| "-".to_string(), str::to_string);
            let state = &i["state"];
            let state = match state["termination"].get("reason") {
                Some(reason) => match state["termination"].get("exitCode") {
                    Some(code) => format!("Terminated({}, {code})", text(reason)),
                    None => format!("Terminated({})", text(reason)),
                },
                None => text(&state["state"]),
            };
            [
                text(&i["instanceId"]),
                text(&i["spec"]["serviceId"]),
                state,
                text(&i["cause"]["payload"]["kind"]),
                text(&i["containerId"]),
            ]
        })
        .collect();
    let header = ["INSTANCE", "SERVICE", "STATE", "CAUSE", "CONTAINER"].map(str::to_string);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    std::iter::once(&header)
        .chain(&rows)
        .map(|row| {
            row.iter()
                .zip(widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

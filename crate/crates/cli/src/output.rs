use serde_json::{json, Map, Value};

/// Process exit codes. These values are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// The input was rejected: validation errors, a malformed package, a 4xx from the server.
    Validation = 1,
    /// Bad flags, environment or config file, unusable storage, rejected credentials.
    Config = 2,
    /// The server or container engine could not be reached or failed.
    Network = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub code: String,
    pub message: String,
    pub details: Option<Value>,
}

impl Failure {
    pub fn new(exit: Exit, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            exit,
            code: code.into(),
            message: message.into(),
            details: None,
        }
    }

    pub fn config(code: &str, message: impl Into<String>) -> Self {
        Self::new(Exit::Config, code, message)
    }

    pub fn validation(code: &str, message: impl Into<String>) -> Self {
        Self::new(Exit::Validation, code, message)
    }

    pub fn network(code: &str, message: impl Into<String>) -> Self {
        Self::new(Exit::Network, code, message)
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }
}

/// Writes results either as one JSON object per line or as text.
#[derive(Debug, Clone, Copy)]
pub struct Printer {
    pub json: bool,
    pub command: &'static str,
}

impl Printer {
    /// Prints `fields` (a JSON object) tagged with the command name, or `human` in text mode.
    pub fn emit(&self, fields: Value, human: impl FnOnce() -> String) {
        if self.json {
            let mut object = Map::new();
            object.insert("command".into(), json!(self.command));
            if let Value::Object(rest) = fields {
                object.extend(rest);
            }
            println!("{}", Value::Object(object));
        } else {
            let text = human();
            if !text.is_empty() {
                println!("{text}");
            }
        }
    }

    pub fn fail(&self, failure: &Failure) {
        if self.json {
            let mut error = json!({
                "code": failure.code,
                "message": failure.message,
                "exitCode": failure.exit as i32,
            });
            if let Some(details) = &failure.details {
                error["details"] = details.clone();
            }
            println!("{}", json!({"command": self.command, "error": error}));
        } else {
            eprintln!("error[{}]: {}", failure.code, failure.message);
            if let Some(Value::Array(items)) = &failure.details {
                for item in items {
                    eprintln!("  {}", describe(item));
                }
            }
        }
    }
}

/// One-line rendering of a finding, or compact JSON for anything else.
pub fn describe(item: &Value) -> String {
    match (item.get("severity"), item.get("code"), item.get("message")) {
        (Some(severity), Some(code), Some(message)) => {
            let path = item.get("path").and_then(Value::as_str).unwrap_or("");
            format!(
                "{} {} {}: {}",
                severity.as_str().unwrap_or("?"),
                code.as_str().unwrap_or("?"),
                path,
                message.as_str().unwrap_or("")
            )
        }
        _ => item.to_string(),
    }
}

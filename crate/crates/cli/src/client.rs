//! Blocking HTTP client for the runtime server.

use std::time::Duration;

use aasrt_server::AASX_CONTENT_TYPE;
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::Value;

use crate::output::{Exit, Failure};

pub struct Remote {
    base: String,
    token: Option<String>,
    http: Client,
}

impl Remote {
    pub fn new(base: String, token: Option<String>) -> Result<Self, Failure> {
        let http = Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| Failure::config("ClientSetup", e.to_string()))?;
        Ok(Self { base, token, http })
    }

    fn send(&self, request: RequestBuilder) -> Result<Value, Failure> {
        let request = match &self.token {
            Some(token) => request.bearer_auth(token),
            None => request,
        };
        let response = request.send().map_err(|e| {
            let kind = if e.is_timeout() { "Timeout" } else { "Unreachable" };
            Failure::network(kind, format!("{}: {}", self.base, error_chain(&e)))
        })?;
        let status = response.status();
        let body = response
            .bytes()
            .map_err(|e| Failure::network("Unreachable", format!("{}: {}", self.base, error_chain(&e))))?;
        let json: Value = if body.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&body).map_err(|e| Failure::network("BadResponse", format!("status {status}: {e}")))?
        };
        if status.is_success() {
            return Ok(json);
        }
        let exit = match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Exit::Config,
            s if s.is_client_error() => Exit::Validation,
            _ => Exit::Network,
        };
        let code = json["error"].as_str().map(str::to_string).unwrap_or_else(|| format!("Http{}", status.as_u16()));
        let message = json["message"].as_str().map(str::to_string).unwrap_or_else(|| status.to_string());
        let failure = Failure::new(exit, code, format!("server answered {}: {message}", status.as_u16()));
        Err(match json.get("details") {
            Some(details) => failure.with_details(details.clone()),
            None => failure,
        })
    }

    pub fn import(&self, archive: Vec<u8>) -> Result<Value, Failure> {
        self.send(
            self.http
                .post(format!("{}/import", self.base))
                .header(reqwest::header::CONTENT_TYPE, AASX_CONTENT_TYPE)
                .body(archive),
        )
    }

    pub fn instances(&self) -> Result<Value, Failure> {
        self.send(self.http.get(format!("{}/instances", self.base)))
    }

    pub fn gc(&self) -> Result<Value, Failure> {
        self.send(self.http.post(format!("{}/contexts/gc", self.base)))
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut text = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        text.push_str(": ");
        text.push_str(&s.to_string());
        source = s.source();
    }
    text
}

//! The plugin side of the offloading protocol.
//!
//! Five endpoints: `POST /create`, `GET /status`, `GET /logs`, `POST /delete`
//! and `GET /ping`. [`http::handle`] is the byte-level router shared by the
//! network server and the in-process loopback transport, so both speak exactly
//! the same bytes.

pub mod client;
pub mod http;
pub mod local;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::resources::ResourceVector;
use crate::time::Timestamp;

/// Env var carrying the expected runtime to the backend. Simulated sites use it
/// as the payload duration.
pub const EXPECTED_DURATION_ENV: &str = "OFFLOAD_EXPECTED_DURATION_S";

/// Exit code reported for jobs terminated by a delete (128 + SIGKILL).
pub const TERMINATED_EXIT_CODE: i32 = 137;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginJobRequest {
    pub job_id: String,
    pub image: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub resources: ResourceVector,
    /// Shareable secrets only, base64 encoded.
    #[serde(default)]
    pub secret_bundle: BTreeMap<String, String>,
    pub timeout_s: u64,
}

impl PluginJobRequest {
    pub fn check(&self) -> Result<(), PluginError> {
        if self.job_id.is_empty() {
            return Err(PluginError::BadRequest("job_id must be non-empty".into()));
        }
        if self.command.is_empty() {
            return Err(PluginError::BadRequest("command must be non-empty".into()));
        }
        for (name, payload) in &self.secret_bundle {
            if base64::engine::general_purpose::STANDARD.decode(payload).is_err() {
                return Err(PluginError::BadRequest(format!("secret {name} is not valid base64")));
            }
        }
        Ok(())
    }

    pub fn decoded_secrets(&self) -> Result<BTreeMap<String, Vec<u8>>, PluginError> {
        self.secret_bundle
            .iter()
            .map(|(k, v)| {
                base64::engine::general_purpose::STANDARD
                    .decode(v)
                    .map(|bytes| (k.clone(), bytes))
                    .map_err(|_| PluginError::BadRequest(format!("secret {k} is not valid base64")))
            })
            .collect()
    }

    /// The payload duration a simulated backend should use.
    pub fn expected_duration_s(&self) -> f64 {
        self.env
            .get(EXPECTED_DURATION_ENV)
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or(self.timeout_s as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub backend_ref: String,
}

/// Job state as reported by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RemoteState {
    Pending,
    Running,
    Succeeded,
    Failed,
    Unknown,
}

impl RemoteState {
    pub fn as_str(self) -> &'static str {
        match self {
            RemoteState::Pending => "pending",
            RemoteState::Running => "running",
            RemoteState::Succeeded => "succeeded",
            RemoteState::Failed => "failed",
            RemoteState::Unknown => "unknown",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RemoteState::Succeeded | RemoteState::Failed)
    }
}

impl fmt::Display for RemoteState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps any backend state word onto [`RemoteState`]. Total: unrecognised words
/// map to `Unknown`. Covers the HTCondor, Slurm and Podman vocabularies besides
/// the protocol's own.
pub fn map_status(word: &str) -> RemoteState {
    let w = word.trim().to_ascii_lowercase();
    match w.as_str() {
        "pending" | "idle" | "held" | "queued" | "configuring" | "created" | "suspended" | "1" | "5" => {
            RemoteState::Pending
        }
        "running" | "completing" | "transferring_output" | "2" | "6" => RemoteState::Running,
        "succeeded" | "completed" | "exited" | "4" => RemoteState::Succeeded,
        "failed" | "cancelled" | "timeout" | "node_fail" | "out_of_memory" | "removed" | "preempted"
        | "boot_fail" | "deadline" | "3" | "7" => RemoteState::Failed,
        _ => RemoteState::Unknown,
    }
}

impl Serialize for RemoteState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RemoteState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(map_status(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusDoc {
    pub state: RemoteState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<Timestamp>,
}

impl StatusDoc {
    pub fn unknown() -> Self {
        StatusDoc {
            state: RemoteState::Unknown,
            exit_code: None,
            started_at: None,
            finished_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteRequest {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteResponse {
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingResponse {
    pub site: String,
    pub capacity: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PluginError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unavailable(String),
}

impl PluginError {
    pub fn http_status(&self) -> u16 {
        match self {
            PluginError::BadRequest(_) => 400,
            PluginError::NotFound(_) => 404,
            PluginError::Unavailable(_) => 503,
        }
    }
}

/// A backend that implements the plugin protocol.
pub trait Plugin: Send {
    fn site(&self) -> &str;
    /// Idempotent on `job_id`.
    fn create(&mut self, request: &PluginJobRequest) -> Result<CreateResponse, PluginError>;
    /// Unknown ids report state `unknown`.
    fn status(&mut self, job_id: &str) -> StatusDoc;
    fn logs(&mut self, job_id: &str, tail: usize) -> Result<String, PluginError>;
    /// Idempotent; `deleted` is true iff the id is known.
    fn delete(&mut self, job_id: &str) -> DeleteResponse;
    fn ping(&mut self) -> PingResponse;
}

/// Last `n` lines of `text`, joined with `\n`, no trailing newline.
pub fn tail_lines(text: &str, n: usize) -> String {
    if n == 0 {
        return String::new();
    }
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.len().saturating_sub(n);
    lines[start..].join("\n")
}

//! Workload specifications and the job lifecycle state machine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::ResourceVector;
use crate::time::Timestamp;

/// Handle prefix for secrets held in the gatekeeper's store.
pub const SECRET_HANDLE_PREFIX: &str = "store:";

/// Env values of this form bind a variable to a secret by name.
pub const SECRET_ENV_PREFIX: &str = "secret://";

pub fn secret_handle(name: &str) -> String {
    format!("{SECRET_HANDLE_PREFIX}{name}")
}

/// A reference to a secret. Never carries payload bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretRef {
    pub name: String,
    /// Whether policy allows shipping this secret to a remote site.
    pub shareable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
}

impl SecretRef {
    pub fn new(name: impl Into<String>, shareable: bool) -> Self {
        SecretRef {
            name: name.into(),
            shareable,
            payload_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    InteractiveSession,
    BatchJob,
}

/// Placement preference for offload-compatible batch jobs. Jobs that fit
/// locally run locally unless they ask for remote placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementHint {
    #[default]
    LocalFirst,
    PreferRemote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub workload_id: String,
    pub owner: String,
    pub group: String,
    pub image: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub demand: ResourceVector,
    #[serde(default)]
    pub secret_refs: Vec<SecretRef>,
    #[serde(default)]
    pub offload_compatible: bool,
    pub expected_duration_s: u64,
    #[serde(default)]
    pub uses_local_storage: bool,
    pub kind: WorkloadKind,
    #[serde(default)]
    pub placement: PlacementHint,
}

impl WorkloadSpec {
    /// A minimal valid batch job, convenient for tests and generators.
    pub fn batch(id: impl Into<String>, owner: impl Into<String>, group: impl Into<String>) -> Self {
        WorkloadSpec {
            workload_id: id.into(),
            owner: owner.into(),
            group: group.into(),
            image: "registry.local/default:latest".into(),
            command: vec!["true".into()],
            env: BTreeMap::new(),
            demand: ResourceVector::cores(1),
            secret_refs: Vec::new(),
            offload_compatible: false,
            expected_duration_s: 3600,
            uses_local_storage: false,
            kind: WorkloadKind::BatchJob,
            placement: PlacementHint::LocalFirst,
        }
    }

    pub fn session(id: impl Into<String>, owner: impl Into<String>, group: impl Into<String>) -> Self {
        WorkloadSpec {
            kind: WorkloadKind::InteractiveSession,
            command: vec!["jupyterhub-singleuser".into()],
            uses_local_storage: true,
            ..Self::batch(id, owner, group)
        }
    }

    pub fn is_interactive(&self) -> bool {
        self.kind == WorkloadKind::InteractiveSession
    }

    /// Offload-compatible specs may be re-executed after lost contact.
    pub fn idempotent_safe(&self) -> bool {
        self.offload_compatible
    }

    pub fn all_secrets_shareable(&self) -> bool {
        self.secret_refs.iter().all(|s| s.shareable)
    }
}

/// One broken rule in a [`WorkloadSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: impl Into<String>) -> Self {
        Violation {
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rule)
    }
}

/// Checks every [`WorkloadSpec`] invariant. Returns one entry per broken rule.
pub fn validate_spec(spec: &WorkloadSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.workload_id.trim().is_empty() {
        out.push(Violation::new("workload_id", "workload_id must be non-empty"));
    }
    if spec.owner.trim().is_empty() {
        out.push(Violation::new("owner", "owner must be non-empty"));
    }
    if spec.group.trim().is_empty() {
        out.push(Violation::new("group", "group must be non-empty"));
    }
    if spec.command.is_empty() {
        out.push(Violation::new("command", "command must be non-empty"));
    }
    if spec.expected_duration_s == 0 {
        out.push(Violation::new("expected_duration_s", "expected_duration_s must be > 0"));
    }
    if spec.demand.gpus.keys().any(|m| m.trim().is_empty()) {
        out.push(Violation::new("demand.gpus", "gpu model names must be non-empty"));
    }
    for secret in &spec.secret_refs {
        if let Some(handle) = &secret.payload_ref {
            if *handle != secret_handle(&secret.name) {
                out.push(Violation::new(
                    "secret_refs",
                    format!("secret_refs[{}].payload_ref must be an opaque store handle", secret.name),
                ));
            }
        }
    }
    if spec.offload_compatible {
        if spec.uses_local_storage {
            out.push(Violation::new(
                "uses_local_storage",
                "offload_compatible requires uses_local_storage=false",
            ));
        }
        if !spec.all_secrets_shareable() {
            out.push(Violation::new(
                "secret_refs",
                "offload_compatible requires all secrets shareable",
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    AdmittedLocal,
    AdmittedRemote(String),
    Running,
    Evicted,
    Succeeded,
    Failed,
    Unknown,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    pub fn name(&self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::AdmittedLocal => "admitted_local",
            JobState::AdmittedRemote(_) => "admitted_remote",
            JobState::Running => "running",
            JobState::Evicted => "evicted",
            JobState::Succeeded => "succeeded",
            JobState::Failed => "failed",
            JobState::Unknown => "unknown",
            JobState::Cancelled => "cancelled",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobState::AdmittedRemote(node) => write!(f, "admitted_remote({node})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEvent {
    AdmitLocal,
    AdmitRemote(String),
    Start,
    Succeed,
    Fail,
    Evict,
    LoseContact,
    Requeue,
    Cancel,
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::AdmitLocal => "admit_local",
            JobEvent::AdmitRemote(_) => "admit_remote",
            JobEvent::Start => "start",
            JobEvent::Succeed => "succeed",
            JobEvent::Fail => "fail",
            JobEvent::Evict => "evict",
            JobEvent::LoseContact => "lose_contact",
            JobEvent::Requeue => "requeue",
            JobEvent::Cancel => "cancel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: {event} from {state}")]
pub struct IllegalTransition {
    pub state: JobState,
    pub event: &'static str,
}

/// The lifecycle table. `None` means the event is illegal in `state`.
pub fn next_state(state: &JobState, event: &JobEvent) -> Option<JobState> {
    use JobEvent as E;
    use JobState as S;
    match (state, event) {
        (S::Queued, E::AdmitLocal) => Some(S::AdmittedLocal),
        (S::Queued, E::AdmitRemote(node)) => Some(S::AdmittedRemote(node.clone())),
        (S::Queued, E::Cancel) => Some(S::Cancelled),

        (S::AdmittedLocal, E::Start) => Some(S::Running),
        (S::AdmittedLocal, E::Evict) => Some(S::Evicted),
        (S::AdmittedLocal, E::Cancel) => Some(S::Cancelled),

        (S::AdmittedRemote(_), E::Start) => Some(S::Running),
        (S::AdmittedRemote(_), E::LoseContact) => Some(S::Unknown),
        (S::AdmittedRemote(_), E::Cancel) => Some(S::Cancelled),
        (S::AdmittedRemote(_), E::Fail) => Some(S::Failed),

        (S::Running, E::Succeed) => Some(S::Succeeded),
        (S::Running, E::Fail) => Some(S::Failed),
        (S::Running, E::Evict) => Some(S::Evicted),
        (S::Running, E::LoseContact) => Some(S::Unknown),
        (S::Running, E::Cancel) => Some(S::Cancelled),

        (S::Evicted, E::Requeue) => Some(S::Queued),

        (S::Unknown, E::Requeue) => Some(S::Queued),
        (S::Unknown, E::Fail) => Some(S::Failed),

        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub at: Timestamp,
    pub state: JobState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: WorkloadSpec,
    pub state: JobState,
    pub state_history: Vec<StateChange>,
    pub assigned_site: Option<String>,
    pub eviction_count: u32,
}

/// Site name used for the local capacity pool.
pub const LOCAL_SITE: &str = "local";

impl JobRecord {
    pub fn new(spec: WorkloadSpec, now: Timestamp) -> Self {
        JobRecord {
            spec,
            state: JobState::Queued,
            state_history: vec![StateChange {
                at: now,
                state: JobState::Queued,
                reason: "submitted".into(),
            }],
            assigned_site: None,
            eviction_count: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.spec.workload_id
    }

    /// Applies `event` and returns the updated record. `self` is left untouched.
    pub fn transition(
        &self,
        event: &JobEvent,
        now: Timestamp,
        reason: &str,
    ) -> Result<JobRecord, IllegalTransition> {
        let mut next = self.clone();
        next.apply(event, now, reason)?;
        Ok(next)
    }

    /// In-place form of [`JobRecord::transition`]; on error nothing changes.
    pub fn apply(&mut self, event: &JobEvent, now: Timestamp, reason: &str) -> Result<(), IllegalTransition> {
        let state = next_state(&self.state, event).ok_or_else(|| IllegalTransition {
            state: self.state.clone(),
            event: event.name(),
        })?;
        match event {
            JobEvent::AdmitLocal => self.assigned_site = Some(LOCAL_SITE.to_string()),
            JobEvent::AdmitRemote(node) => self.assigned_site = Some(node.clone()),
            JobEvent::Evict => self.eviction_count += 1,
            JobEvent::Requeue => self.assigned_site = None,
            _ => {}
        }
        self.state = state.clone();
        self.state_history.push(StateChange {
            at: now,
            state,
            reason: reason.to_string(),
        });
        Ok(())
    }
}

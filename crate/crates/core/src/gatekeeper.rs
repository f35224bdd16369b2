//! The submission gateway: membership checks, the platform secret store and
//! session cloning.
//!
//! Users never talk to the queue directly. Every spec passes through
//! [`Gatekeeper::submit`], which forces reserved fields (owner, secret handles),
//! rejects what policy forbids and attaches platform secrets by reference.
//! Payload bytes live only in [`SecretStore`] and leave it only through
//! [`Gatekeeper::secret_bundle`], which is called at dispatch time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    secret_handle, validate_spec, JobRecord, SecretRef, Violation, WorkloadKind, WorkloadSpec,
    SECRET_ENV_PREFIX,
};
use crate::resources::{fits, ResourceVector};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPolicy {
    pub group: String,
    pub members: BTreeSet<String>,
    #[serde(default)]
    pub quota: ResourceVector,
    #[serde(default)]
    pub allowed_gpu_models: BTreeSet<String>,
    #[serde(default)]
    pub offload_allowed: bool,
}

impl GroupPolicy {
    fn check(&self) -> Result<(), ConfigError> {
        for (model, count) in &self.quota.gpus {
            if *count > 0 && !self.allowed_gpu_models.contains(model) {
                return Err(ConfigError::Policy(format!(
                    "group {}: quota names gpu model {model} outside allowed_gpu_models",
                    self.group
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The membership roster. Replaced as a whole on reload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySet {
    #[serde(default)]
    pub groups: Vec<GroupPolicy>,
}

impl PolicySet {
    pub fn new(groups: Vec<GroupPolicy>) -> Result<Self, ConfigError> {
        let set = PolicySet { groups };
        set.check()?;
        Ok(set)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let set: PolicySet = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        set.check()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if !seen.insert(&g.group) {
                return Err(ConfigError::Policy(format!("duplicate group {}", g.group)));
            }
            g.check()?;
        }
        Ok(())
    }

    pub fn get(&self, group: &str) -> Option<&GroupPolicy> {
        self.groups.iter().find(|g| g.group == group)
    }
}

#[derive(Clone)]
struct StoredSecret {
    payload: Vec<u8>,
    shareable: bool,
}

/// Secret payloads. Nothing here is ever serialized into a user-facing response.
#[derive(Clone, Default)]
pub struct SecretStore {
    entries: BTreeMap<String, StoredSecret>,
}

impl std::fmt::Debug for SecretStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecretStore")
            .field("names", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl SecretStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: impl Into<Vec<u8>>, shareable: bool) {
        self.entries.insert(
            name.into(),
            StoredSecret {
                payload: payload.into(),
                shareable,
            },
        );
    }

    /// Loads every file in `dir` as a secret named after the file. A sidecar
    /// `<name>.shareable` containing `true` marks it shareable; anything else,
    /// including a missing sidecar, keeps it local.
    pub fn load_dir(dir: &Path) -> Result<Self, ConfigError> {
        let io = |source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut store = SecretStore::new();
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let entry = entry.map_err(io)?;
            if !entry.file_type().map_err(io)?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".shareable") || name.starts_with('.') {
                continue;
            }
            names.push(name);
        }
        for name in names {
            let payload = std::fs::read(dir.join(&name)).map_err(io)?;
            let shareable = std::fs::read_to_string(dir.join(format!("{name}.shareable")))
                .map(|s| s.trim() == "true")
                .unwrap_or(false);
            store.insert(name, payload, shareable);
        }
        Ok(store)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shareable(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|s| s.shareable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTemplate {
    pub session_id: String,
    pub spec: WorkloadSpec,
    pub startup_command: Vec<String>,
}

/// What to do with a request whose reserved fields disagree with the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConformanceMode {
    #[default]
    Rewrite,
    Reject,
}

/// What to do with non-shareable secrets when a session is cloned for offloading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneSecretPolicy {
    #[default]
    Strip,
    Reject,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatekeeperConfig {
    /// Secret names attached to every accepted job.
    pub platform_secrets: Vec<String>,
    pub conformance: ConformanceMode,
    pub clone_secrets: CloneSecretPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("{user} is not a member of group {group}")]
    NotAMember { user: String, group: String },
    #[error("gpu models not allowed for group {group}: {models:?}")]
    QuotaModelViolation { group: String, models: Vec<String> },
    #[error("demand exceeds quota of group {group}")]
    QuotaExceeded { group: String },
    #[error("invalid spec")]
    SpecInvalid(Vec<Violation>),
    #[error("group {group} may not offload")]
    OffloadForbidden { group: String },
    #[error("workload {0} already exists")]
    DuplicateWorkload(String),
    #[error("owner {owner} does not match submitter {submitter}")]
    OwnerMismatch { owner: String, submitter: String },
    #[error("platform secret {0} missing from store")]
    MissingPlatformSecret(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("clone cannot be offloaded: command depends on secret {secret}")]
    CloneNotOffloadable { secret: String },
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::NotAMember { .. } => "NotAMember",
            Rejection::QuotaModelViolation { .. } => "QuotaModelViolation",
            Rejection::QuotaExceeded { .. } => "QuotaExceeded",
            Rejection::SpecInvalid(_) => "SpecInvalid",
            Rejection::OffloadForbidden { .. } => "OffloadForbidden",
            Rejection::DuplicateWorkload(_) => "DuplicateWorkload",
            Rejection::OwnerMismatch { .. } => "OwnerMismatch",
            Rejection::MissingPlatformSecret(_) => "MissingPlatformSecret",
            Rejection::SessionNotFound(_) => "SessionNotFound",
            Rejection::CloneNotOffloadable { .. } => "CloneNotOffloadable",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            Rejection::NotAMember { .. }
            | Rejection::QuotaModelViolation { .. }
            | Rejection::OffloadForbidden { .. }
            | Rejection::OwnerMismatch { .. } => 403,
            Rejection::DuplicateWorkload(_) => 409,
            Rejection::SessionNotFound(_) => 404,
            Rejection::MissingPlatformSecret(_) => 500,
            Rejection::QuotaExceeded { .. }
            | Rejection::SpecInvalid(_)
            | Rejection::CloneNotOffloadable { .. } => 422,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            Rejection::SpecInvalid(v) => v.iter().map(|v| v.to_string()).collect(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("secret {0} is not shareable and cannot leave the platform")]
    NonShareable(String),
    #[error("secret {0} missing from store")]
    Missing(String),
}

/// Merges platform secrets into `refs`, platform entries taking precedence on
/// name collisions. Returns the merged list and the names that collided.
pub fn merge_platform_secrets(refs: &[SecretRef], platform: &[SecretRef]) -> (Vec<SecretRef>, Vec<String>) {
    let platform_names: BTreeSet<&str> = platform.iter().map(|s| s.name.as_str()).collect();
    let mut collisions = Vec::new();
    let mut merged = Vec::with_capacity(refs.len() + platform.len());
    for r in refs {
        if platform_names.contains(r.name.as_str()) {
            collisions.push(r.name.clone());
        } else {
            merged.push(r.clone());
        }
    }
    merged.extend(platform.iter().cloned());
    (merged, collisions)
}

/// Env variables bound to secret `name` via `secret://name`.
fn env_vars_bound_to<'a>(spec: &'a WorkloadSpec, name: &str) -> Vec<&'a str> {
    spec.env
        .iter()
        .filter(|(_, v)| v.strip_prefix(SECRET_ENV_PREFIX) == Some(name))
        .map(|(k, _)| k.as_str())
        .collect()
}

fn command_references_var(command: &[String], var: &str) -> bool {
    let plain = format!("${var}");
    let braced = format!("${{{var}}}");
    command.iter().any(|arg| {
        arg.contains(&braced)
            || arg.match_indices(&plain).any(|(i, m)| {
                // `$FOO` must not match `$FOOBAR`
                arg[i + m.len()..]
                    .chars()
                    .next()
                    .is_none_or(|c| !(c.is_ascii_alphanumeric() || c == '_'))
            })
    })
}

pub struct Gatekeeper {
    policies: Arc<PolicySet>,
    secrets: Arc<SecretStore>,
    config: GatekeeperConfig,
    sessions: BTreeMap<String, SessionTemplate>,
    known_ids: BTreeSet<String>,
    clone_seq: u64,
}

impl Gatekeeper {
    pub fn new(policies: PolicySet, secrets: SecretStore, config: GatekeeperConfig) -> Self {
        Gatekeeper {
            policies: Arc::new(policies),
            secrets: Arc::new(secrets),
            config,
            sessions: BTreeMap::new(),
            known_ids: BTreeSet::new(),
            clone_seq: 0,
        }
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn replace_policies(&mut self, policies: PolicySet) {
        self.policies = Arc::new(policies);
    }

    pub fn replace_secrets(&mut self, secrets: SecretStore) {
        self.secrets = Arc::new(secrets);
    }

    pub fn session(&self, id: &str) -> Option<&SessionTemplate> {
        self.sessions.get(id)
    }

    /// The single submission path.
    pub fn submit(&mut self, mut spec: WorkloadSpec, submitter: &str, now: Timestamp) -> Result<JobRecord, Rejection> {
        if spec.owner != submitter {
            match self.config.conformance {
                ConformanceMode::Rewrite => spec.owner = submitter.to_string(),
                ConformanceMode::Reject => {
                    return Err(Rejection::OwnerMismatch {
                        owner: spec.owner,
                        submitter: submitter.to_string(),
                    })
                }
            }
        }

        let policy = match self.policies.get(&spec.group) {
            Some(p) if p.members.contains(submitter) => p.clone(),
            _ => {
                return Err(Rejection::NotAMember {
                    user: submitter.to_string(),
                    group: spec.group,
                })
            }
        };

        let mut violations = Vec::new();
        for secret in &mut spec.secret_refs {
            match self.secrets.shareable(&secret.name) {
                Some(shareable) => {
                    let forged = secret.payload_ref.as_ref().is_some_and(|h| *h != secret_handle(&secret.name));
                    if forged && self.config.conformance == ConformanceMode::Reject {
                        continue; // validate_spec reports it
                    }
                    secret.shareable = shareable;
                    secret.payload_ref = Some(secret_handle(&secret.name));
                }
                None => violations.push(Violation {
                    field: "secret_refs".into(),
                    rule: format!("secret_refs[{}] names an unknown secret", secret.name),
                }),
            }
        }
        violations.extend(validate_spec(&spec));
        if !violations.is_empty() {
            return Err(Rejection::SpecInvalid(violations));
        }

        let bad_models: Vec<String> = spec
            .demand
            .gpus
            .iter()
            .filter(|(m, c)| **c > 0 && !policy.allowed_gpu_models.contains(*m))
            .map(|(m, _)| m.clone())
            .collect();
        if !bad_models.is_empty() {
            return Err(Rejection::QuotaModelViolation {
                group: policy.group,
                models: bad_models,
            });
        }
        if !fits(&spec.demand, &policy.quota) {
            return Err(Rejection::QuotaExceeded { group: policy.group });
        }
        if spec.offload_compatible && !policy.offload_allowed {
            return Err(Rejection::OffloadForbidden { group: policy.group });
        }
        if self.known_ids.contains(&spec.workload_id) {
            return Err(Rejection::DuplicateWorkload(spec.workload_id));
        }

        let template = spec.clone();
        let job = self.inject_platform_secrets(JobRecord::new(spec, now))?;
        self.known_ids.insert(job.spec.workload_id.clone());
        if template.kind == WorkloadKind::InteractiveSession {
            self.sessions.insert(
                template.workload_id.clone(),
                SessionTemplate {
                    session_id: template.workload_id.clone(),
                    startup_command: template.command.clone(),
                    spec: template,
                },
            );
        }
        Ok(job)
    }

    /// Appends the configured platform secrets by reference. Offload-compatible
    /// jobs only receive the shareable ones.
    pub fn inject_platform_secrets(&self, mut job: JobRecord) -> Result<JobRecord, Rejection> {
        let mut platform = Vec::new();
        for name in &self.config.platform_secrets {
            let shareable = self
                .secrets
                .shareable(name)
                .ok_or_else(|| Rejection::MissingPlatformSecret(name.clone()))?;
            if job.spec.offload_compatible && !shareable {
                continue;
            }
            platform.push(SecretRef {
                name: name.clone(),
                shareable,
                payload_ref: Some(secret_handle(name)),
            });
        }
        let (merged, collisions) = merge_platform_secrets(&job.spec.secret_refs, &platform);
        for name in &collisions {
            tracing::warn!(workload = %job.spec.workload_id, secret = %name, "user secret reference replaced by platform secret");
        }
        job.spec.secret_refs = merged;
        Ok(job)
    }

    /// Builds a batch spec that reuses a live session's environment with a new command.
    pub fn clone_session(
        &mut self,
        session_id: &str,
        command: Vec<String>,
        offload_compatible: bool,
    ) -> Result<WorkloadSpec, Rejection> {
        let template = self
            .sessions
            .get(session_id)
            .ok_or_else(|| Rejection::SessionNotFound(session_id.to_string()))?;
        let mut spec = template.spec.clone();
        spec.kind = WorkloadKind::BatchJob;
        spec.command = command;
        spec.workload_id = loop {
            self.clone_seq += 1;
            let id = format!("{session_id}-cloning-{}", self.clone_seq);
            if !self.known_ids.contains(&id) {
                break id;
            }
        };

        if offload_compatible {
            spec.offload_compatible = true;
            spec.uses_local_storage = false;
            let private: Vec<String> = spec
                .secret_refs
                .iter()
                .filter(|s| !s.shareable)
                .map(|s| s.name.clone())
                .collect();
            for name in &private {
                let bound = env_vars_bound_to(&spec, name);
                let referenced = bound.iter().any(|v| command_references_var(&spec.command, v));
                if referenced || self.config.clone_secrets == CloneSecretPolicy::Reject {
                    return Err(Rejection::CloneNotOffloadable { secret: name.clone() });
                }
                let bound: Vec<String> = bound.into_iter().map(str::to_string).collect();
                for var in bound {
                    spec.env.remove(&var);
                }
            }
            spec.secret_refs.retain(|s| s.shareable);
        }

        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(Rejection::SpecInvalid(violations));
        }
        Ok(spec)
    }

    /// Base64 payloads for a remote dispatch. Refuses anything non-shareable.
    pub fn secret_bundle(&self, refs: &[SecretRef]) -> Result<BTreeMap<String, String>, BundleError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut out = BTreeMap::new();
        for r in refs {
            let stored = self
                .secrets
                .entries
                .get(&r.name)
                .ok_or_else(|| BundleError::Missing(r.name.clone()))?;
            if !stored.shareable || !r.shareable {
                return Err(BundleError::NonShareable(r.name.clone()));
            }
            out.insert(r.name.clone(), engine.encode(&stored.payload));
        }
        Ok(out)
    }
}

impl Gatekeeper {
    /// Base64 payloads for a run that stays on the platform; private secrets included.
    pub fn local_bundle(&self, refs: &[SecretRef]) -> BTreeMap<String, String> {
        let engine = base64::engine::general_purpose::STANDARD;
        refs.iter()
            .filter_map(|r| {
                let stored = self.secrets.entries.get(&r.name)?;
                Some((r.name.clone(), engine.encode(&stored.payload)))
            })
            .collect()
    }
}

//! Virtual nodes: scheduler targets backed by a plugin instead of a kernel.
//!
//! A node holds a lease renewed by successful pings, a table of remote job
//! handles, and a plugin client. It never mutates job records itself; every
//! observation comes back as a [`StateUpdate`] for the queue to apply.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatekeeper::{BundleError, Gatekeeper};
use crate::model::{JobEvent, JobRecord, JobState, SecretRef};
use crate::plugin::client::{ClientError, PluginClient};
use crate::plugin::{PluginJobRequest, RemoteState, EXPECTED_DURATION_ENV};
use crate::resources::ResourceVector;
use crate::time::Timestamp;

/// Resolves secret references to base64 payloads at dispatch time.
pub trait SecretSource {
    fn bundle(&self, refs: &[SecretRef]) -> Result<BTreeMap<String, String>, BundleError>;
}

impl SecretSource for Gatekeeper {
    fn bundle(&self, refs: &[SecretRef]) -> Result<BTreeMap<String, String>, BundleError> {
        self.secret_bundle(refs)
    }
}

fn default_interval() -> u64 {
    10
}
fn default_ttl() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub plugin_endpoint: String,
    #[serde(default = "default_interval")]
    pub heartbeat_interval_s: u64,
    #[serde(default = "default_ttl")]
    pub ttl_s: u64,
    #[serde(default = "default_interval")]
    pub poll_interval_s: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>, plugin_endpoint: impl Into<String>) -> Self {
        NodeConfig {
            node_id: node_id.into(),
            plugin_endpoint: plugin_endpoint.into(),
            heartbeat_interval_s: default_interval(),
            ttl_s: default_ttl(),
            poll_interval_s: default_interval(),
            max_retries: default_max_retries(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readiness {
    Ready,
    NotReady,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub last_renewal: Option<Timestamp>,
    pub ttl_s: u64,
}

impl Lease {
    pub fn valid_at(&self, now: Timestamp) -> bool {
        self.last_renewal
            .is_some_and(|t| now.millis_since(t) <= self.ttl_s as i64 * 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteJobHandle {
    pub workload_id: String,
    /// Id used on the plugin side; changes with each dispatch epoch.
    pub plugin_job_id: String,
    /// None until a create call has been acknowledged.
    pub backend_ref: Option<String>,
    pub last_observed_state: Option<RemoteState>,
    pub last_poll: Option<Timestamp>,
    pub retries: u32,
    pub next_attempt: Timestamp,
    /// Set while the job is Unknown to the controller.
    pub unknown_since: Option<Timestamp>,
    started: bool,
    idempotent_safe: bool,
    /// Request without payloads; secrets are re-resolved on each create attempt.
    #[serde(skip)]
    request: Option<(PluginJobRequest, Vec<SecretRef>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualNodeState {
    pub node_id: String,
    pub plugin_endpoint: String,
    pub advertised_capacity: ResourceVector,
    pub lease: Lease,
    pub readiness: Readiness,
    pub assigned: BTreeMap<String, RemoteJobHandle>,
}

/// An event for the queue, produced by a heartbeat or a poll.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateUpdate {
    pub job: String,
    pub event: JobEvent,
    pub reason: String,
    /// For requeues: the backend still knows the job, so prefer this node again.
    pub reattach: bool,
}

impl StateUpdate {
    fn new(job: &str, event: JobEvent, reason: impl Into<String>) -> Self {
        StateUpdate {
            job: job.to_string(),
            event,
            reason: reason.into(),
            reattach: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("node {0} is not ready")]
    NodeNotReady(String),
    #[error("job {job} is {state}, not admitted to this node")]
    NotAssigned { job: String, state: String },
    /// Defense in depth: the queue should never route such a job here.
    #[error("refusing to ship job {job}: {reason}")]
    Guard { job: String, reason: String },
    #[error(transparent)]
    Secrets(#[from] BundleError),
    #[error("plugin rejected job ({status}): {message}")]
    PluginRejected { status: u16, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("node {0} is already registered")]
pub struct DuplicateNode(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeartbeatOutcome {
    pub readiness: Readiness,
    pub updates: Vec<StateUpdate>,
}

pub struct VirtualNode {
    config: NodeConfig,
    client: Box<dyn PluginClient>,
    state: VirtualNodeState,
    dispatch_calls: u64,
}

impl VirtualNode {
    pub fn new(config: NodeConfig, client: Box<dyn PluginClient>) -> Self {
        let state = VirtualNodeState {
            node_id: config.node_id.clone(),
            plugin_endpoint: config.plugin_endpoint.clone(),
            advertised_capacity: ResourceVector::zero(),
            lease: Lease {
                last_renewal: None,
                ttl_s: config.ttl_s,
            },
            readiness: Readiness::NotReady,
            assigned: BTreeMap::new(),
        };
        VirtualNode {
            config,
            client,
            state,
            dispatch_calls: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.config.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn state(&self) -> &VirtualNodeState {
        &self.state
    }

    pub fn is_ready(&self) -> bool {
        self.state.readiness == Readiness::Ready
    }

    pub fn handle(&self, job: &str) -> Option<&RemoteJobHandle> {
        self.state.assigned.get(job)
    }

    /// Create calls issued so far, retries included.
    pub fn dispatch_calls(&self) -> u64 {
        self.dispatch_calls
    }

    pub fn client_mut(&mut self) -> &mut dyn PluginClient {
        self.client.as_mut()
    }

    fn poll_ms(&self) -> i64 {
        self.config.poll_interval_s as i64 * 1000
    }

    /// Moves every handle not already Unknown to Unknown.
    fn lose_all(&mut self, now: Timestamp, reason: &str) -> Vec<StateUpdate> {
        let poll = self.poll_ms();
        let mut out = Vec::new();
        for (id, h) in self.state.assigned.iter_mut() {
            if h.unknown_since.is_none() {
                h.unknown_since = Some(now);
                h.retries = 0;
                h.next_attempt = now.plus_millis(poll);
                out.push(StateUpdate::new(id, JobEvent::LoseContact, reason));
            }
        }
        out
    }

    fn mark_not_ready(&mut self, now: Timestamp, reason: &str) -> Vec<StateUpdate> {
        let was_ready = self.is_ready();
        self.state.readiness = Readiness::NotReady;
        if was_ready {
            tracing::warn!(node = %self.config.node_id, "node not ready: {reason}");
            self.lose_all(now, reason)
        } else {
            Vec::new()
        }
    }

    /// Pings the plugin, renewing the lease on success.
    pub fn heartbeat(&mut self, now: Timestamp) -> HeartbeatOutcome {
        match self.client.ping() {
            Ok(p) => {
                self.state.lease.last_renewal = Some(now);
                self.state.advertised_capacity = p.capacity;
                self.state.readiness = Readiness::Ready;
                HeartbeatOutcome {
                    readiness: Readiness::Ready,
                    updates: Vec::new(),
                }
            }
            Err(e) => {
                let updates = if self.state.lease.valid_at(now) {
                    Vec::new()
                } else {
                    self.mark_not_ready(now, &format!("lease expired: {e}"))
                };
                HeartbeatOutcome {
                    readiness: self.state.readiness,
                    updates,
                }
            }
        }
    }

    fn translate(job: &JobRecord, plugin_job_id: &str) -> PluginJobRequest {
        let spec = &job.spec;
        let mut env = spec.env.clone();
        env.insert(EXPECTED_DURATION_ENV.to_string(), spec.expected_duration_s.to_string());
        PluginJobRequest {
            job_id: plugin_job_id.to_string(),
            image: spec.image.clone(),
            command: spec.command.clone(),
            env,
            resources: spec.demand.clone(),
            secret_bundle: BTreeMap::new(),
            timeout_s: spec.expected_duration_s,
        }
    }

    /// Sends the job to the plugin. A transport failure still records the
    /// handle; the create is retried with backoff from [`Self::poll_and_reconcile`].
    pub fn dispatch(
        &mut self,
        job: &JobRecord,
        plugin_job_id: &str,
        secrets: &dyn SecretSource,
        now: Timestamp,
    ) -> Result<RemoteJobHandle, DispatchError> {
        let id = job.id();
        if !self.is_ready() {
            return Err(DispatchError::NodeNotReady(self.config.node_id.clone()));
        }
        if job.state != JobState::AdmittedRemote(self.config.node_id.clone()) {
            return Err(DispatchError::NotAssigned {
                job: id.to_string(),
                state: job.state.to_string(),
            });
        }
        if let Some(h) = self.state.assigned.get(id) {
            if h.plugin_job_id == plugin_job_id {
                return Ok(h.clone());
            }
        }
        let guard = |reason: &str| {
            Err(DispatchError::Guard {
                job: id.to_string(),
                reason: reason.to_string(),
            })
        };
        if !job.spec.offload_compatible {
            return guard("not offload compatible");
        }
        if let Some(s) = job.spec.secret_refs.iter().find(|s| !s.shareable) {
            return guard(&format!("secret {} is not shareable", s.name));
        }
        let request = Self::translate(job, plugin_job_id);
        // resolve once up front so a store problem fails fast
        secrets.bundle(&job.spec.secret_refs)?;
        let mut handle = RemoteJobHandle {
            workload_id: id.to_string(),
            plugin_job_id: plugin_job_id.to_string(),
            backend_ref: None,
            last_observed_state: None,
            last_poll: None,
            retries: 0,
            next_attempt: now,
            unknown_since: None,
            started: false,
            idempotent_safe: job.spec.idempotent_safe(),
            request: Some((request, job.spec.secret_refs.clone())),
        };
        self.try_create(&mut handle, secrets, now)?;
        self.state.assigned.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    /// One create attempt. Transport failures are absorbed into the handle.
    fn try_create(
        &mut self,
        handle: &mut RemoteJobHandle,
        secrets: &dyn SecretSource,
        now: Timestamp,
    ) -> Result<(), DispatchError> {
        let (template, refs) = handle.request.as_ref().expect("pending create keeps its request");
        let mut request = template.clone();
        request.secret_bundle = secrets.bundle(refs)?;
        self.dispatch_calls += 1;
        let result = self.client.create(&request);
        drop(request);
        match result {
            Ok(backend_ref) => {
                handle.backend_ref = Some(backend_ref);
                handle.request = None;
                handle.retries = 0;
                handle.next_attempt = now.plus_millis(self.poll_ms());
                Ok(())
            }
            Err(ClientError::Rejected { status, message }) => Err(DispatchError::PluginRejected { status, message }),
            Err(ClientError::Unavailable(msg)) => {
                handle.retries += 1;
                let backoff = self.poll_ms() << (handle.retries - 1).min(16);
                handle.next_attempt = now.plus_millis(backoff);
                tracing::debug!(job = %handle.workload_id, retries = handle.retries, "create failed: {msg}");
                Ok(())
            }
        }
    }

    /// Maps a status observation for a live (not Unknown) handle to events.
    fn observe(handle: &mut RemoteJobHandle, state: RemoteState, exit: Option<i32>) -> (Vec<StateUpdate>, bool) {
        let id = handle.workload_id.clone();
        let mut out = Vec::new();
        let done = match state {
            RemoteState::Pending => false,
            RemoteState::Running => {
                if !handle.started {
                    handle.started = true;
                    out.push(StateUpdate::new(&id, JobEvent::Start, "backend running"));
                }
                false
            }
            RemoteState::Succeeded => {
                if !handle.started {
                    out.push(StateUpdate::new(&id, JobEvent::Start, "backend running"));
                }
                out.push(StateUpdate::new(&id, JobEvent::Succeed, format!("exit code {}", exit.unwrap_or(0))));
                true
            }
            RemoteState::Failed => {
                out.push(StateUpdate::new(
                    &id,
                    JobEvent::Fail,
                    format!("backend failed, exit code {}", exit.map_or("none".to_string(), |c| c.to_string())),
                ));
                true
            }
            RemoteState::Unknown => {
                out.push(StateUpdate::new(&id, JobEvent::LoseContact, "backend does not know the job"));
                out.push(Self::give_up(handle, "backend lost the job"));
                true
            }
        };
        (out, done)
    }

    /// Resolution of an Unknown job that cannot be reattached.
    fn give_up(handle: &RemoteJobHandle, why: &str) -> StateUpdate {
        if handle.idempotent_safe {
            StateUpdate::new(&handle.workload_id, JobEvent::Requeue, format!("{why}; requeued"))
        } else {
            StateUpdate::new(&handle.workload_id, JobEvent::Fail, format!("{why}; not safe to rerun"))
        }
    }

    /// Polls every handle that is due and reports the resulting events.
    pub fn poll_and_reconcile(&mut self, now: Timestamp, secrets: &dyn SecretSource) -> Vec<StateUpdate> {
        let mut out = Vec::new();
        let mut finished = Vec::new();
        let mut exhausted_create = false;
        let ids: Vec<String> = self.state.assigned.keys().cloned().collect();
        let max = self.config.max_retries;
        let poll = self.poll_ms();

        for id in ids {
            let mut h = self.state.assigned.remove(&id).expect("listed above");
            if now < h.next_attempt {
                self.state.assigned.insert(id, h);
                continue;
            }

            if h.unknown_since.is_some() {
                h.last_poll = Some(now);
                match self.client.status(&h.plugin_job_id) {
                    Ok(doc) => {
                        h.last_observed_state = Some(doc.state);
                        let u = match doc.state {
                            RemoteState::Failed => {
                                StateUpdate::new(&id, JobEvent::Fail, "backend reports failure after lost contact")
                            }
                            RemoteState::Unknown => Self::give_up(&h, "backend lost the job"),
                            _ => StateUpdate {
                                reattach: true,
                                ..StateUpdate::new(&id, JobEvent::Requeue, "contact restored; reattaching")
                            },
                        };
                        out.push(u);
                        finished.push(id);
                    }
                    Err(_) => {
                        h.retries += 1;
                        h.next_attempt = now.plus_millis(poll);
                        if h.retries >= max {
                            out.push(Self::give_up(&h, "no contact after retries"));
                            finished.push(id);
                        } else {
                            self.state.assigned.insert(id, h);
                        }
                    }
                }
                continue;
            }

            if h.backend_ref.is_none() {
                if !self.is_ready() {
                    self.state.assigned.insert(id, h);
                    continue;
                }
                match self.try_create(&mut h, secrets, now) {
                    Ok(()) => {
                        if h.backend_ref.is_none() && h.retries >= max {
                            exhausted_create = true;
                        }
                        self.state.assigned.insert(id, h);
                    }
                    Err(e) => {
                        out.push(StateUpdate::new(&id, JobEvent::Fail, e.to_string()));
                        finished.push(id);
                    }
                }
                continue;
            }

            h.last_poll = Some(now);
            match self.client.status(&h.plugin_job_id) {
                Ok(doc) => {
                    h.retries = 0;
                    h.last_observed_state = Some(doc.state);
                    h.next_attempt = now.plus_millis(poll);
                    let (updates, done) = Self::observe(&mut h, doc.state, doc.exit_code);
                    out.extend(updates);
                    if done {
                        finished.push(id);
                    } else {
                        self.state.assigned.insert(id, h);
                    }
                }
                Err(_) => {
                    h.retries += 1;
                    h.next_attempt = now.plus_millis(poll);
                    if h.retries >= max {
                        h.unknown_since = Some(now);
                        h.retries = 0;
                        out.push(StateUpdate::new(&id, JobEvent::LoseContact, "status unreachable"));
                    }
                    self.state.assigned.insert(id, h);
                }
            }
        }

        for id in finished {
            self.state.assigned.remove(&id);
        }
        if exhausted_create {
            self.state.lease.last_renewal = None;
            out.extend(self.mark_not_ready(now, "create retries exhausted"));
        }
        out
    }

    /// Drops the handle and asks the plugin to delete the job. Best effort.
    pub fn cancel(&mut self, job: &str) -> Option<RemoteJobHandle> {
        let h = self.state.assigned.remove(job)?;
        let _ = self.client.delete(&h.plugin_job_id);
        Some(h)
    }

    /// Forgets a handle without contacting the plugin.
    pub fn forget(&mut self, job: &str) -> Option<RemoteJobHandle> {
        self.state.assigned.remove(job)
    }
}

#[derive(Default)]
pub struct NodeRegistry {
    nodes: BTreeMap<String, VirtualNode>,
}

impl NodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node. It stays NotReady until its first successful heartbeat.
    pub fn register_node(
        &mut self,
        config: NodeConfig,
        client: Box<dyn PluginClient>,
    ) -> Result<&mut VirtualNode, DuplicateNode> {
        if self.nodes.contains_key(&config.node_id) {
            return Err(DuplicateNode(config.node_id));
        }
        let id = config.node_id.clone();
        Ok(self.nodes.entry(id).or_insert(VirtualNode::new(config, client)))
    }

    pub fn get(&self, id: &str) -> Option<&VirtualNode> {
        self.nodes.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut VirtualNode> {
        self.nodes.get_mut(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VirtualNode> {
        self.nodes.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut VirtualNode> {
        self.nodes.values_mut()
    }

    pub fn snapshot(&self) -> Vec<VirtualNodeState> {
        self.nodes.values().map(|n| n.state.clone()).collect()
    }
}

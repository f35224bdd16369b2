//! The gateway's single writer: gatekeeper, queue, virtual nodes and the local
//! runtime, advanced together by [`Platform::step`].

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::gatekeeper::{Gatekeeper, Rejection};
use crate::model::{JobEvent, JobRecord, JobState, WorkloadSpec};
use crate::plugin::client::PluginClient;
use crate::plugin::{PluginJobRequest, RemoteState, EXPECTED_DURATION_ENV};
use crate::queue::{AuditRecord, ClusterQueue, Decision, QueueConfig, QueueError, QueueSnapshot, StateCounts};
use crate::time::Timestamp;
use crate::vnode::{DispatchError, DuplicateNode, NodeConfig, NodeRegistry, StateUpdate, VirtualNodeState};

/// What one [`Platform::step`] did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepReport {
    pub decisions: Vec<(String, Decision)>,
    pub evicted: Vec<String>,
    pub updates: Vec<StateUpdate>,
    /// Updates the queue refused, with the reason.
    pub rejected_updates: Vec<(StateUpdate, String)>,
}

#[derive(Debug, Clone)]
struct LocalRun {
    plugin_job_id: String,
    started: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlatformSnapshot {
    pub queue: QueueSnapshot,
    pub nodes: Vec<VirtualNodeState>,
}

pub struct Platform {
    gatekeeper: Gatekeeper,
    queue: ClusterQueue,
    nodes: NodeRegistry,
    /// Executes locally admitted jobs, speaking the plugin protocol.
    local_runtime: Box<dyn PluginClient>,
    local_runs: BTreeMap<String, LocalRun>,
    /// Dispatch epoch per job; bumped whenever a new backend execution is needed.
    epochs: BTreeMap<String, u32>,
    /// Node that still holds a backend job the controller may reattach to.
    reattach_from: BTreeMap<String, String>,
    next_heartbeat: BTreeMap<String, Timestamp>,
    next_poll: BTreeMap<String, Timestamp>,
    submitted: u64,
}

/// Plugin-side id for a dispatch epoch.
pub fn plugin_job_id(workload_id: &str, epoch: u32) -> String {
    if epoch == 0 {
        workload_id.to_string()
    } else {
        format!("{workload_id}.{epoch}")
    }
}

impl Platform {
    pub fn new(gatekeeper: Gatekeeper, queue: QueueConfig, local_runtime: Box<dyn PluginClient>) -> Self {
        Platform {
            gatekeeper,
            queue: ClusterQueue::new(queue),
            nodes: NodeRegistry::new(),
            local_runtime,
            local_runs: BTreeMap::new(),
            epochs: BTreeMap::new(),
            reattach_from: BTreeMap::new(),
            next_heartbeat: BTreeMap::new(),
            next_poll: BTreeMap::new(),
            submitted: 0,
        }
    }

    pub fn gatekeeper(&self) -> &Gatekeeper {
        &self.gatekeeper
    }

    pub fn gatekeeper_mut(&mut self) -> &mut Gatekeeper {
        &mut self.gatekeeper
    }

    pub fn queue(&self) -> &ClusterQueue {
        &self.queue
    }

    pub fn nodes(&self) -> &NodeRegistry {
        &self.nodes
    }

    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.queue.job(id)
    }

    /// Accepted submissions so far, counted independently of the queue.
    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn counts(&self) -> StateCounts {
        self.queue.counts()
    }

    pub fn decisions_since(&self, since: Timestamp) -> Vec<AuditRecord> {
        self.queue.decisions_since(since)
    }

    pub fn snapshot(&self) -> PlatformSnapshot {
        PlatformSnapshot {
            queue: self.queue.snapshot(),
            nodes: self.nodes.snapshot(),
        }
    }

    pub fn metrics(&self, now: Timestamp) -> String {
        crate::metrics::expose_metrics(&self.queue.snapshot(), now)
    }

    pub fn epoch(&self, id: &str) -> u32 {
        self.epochs.get(id).copied().unwrap_or(0)
    }

    /// Adds a virtual node; it is pinged on the next step.
    pub fn register_node(
        &mut self,
        config: NodeConfig,
        client: Box<dyn PluginClient>,
        now: Timestamp,
    ) -> Result<(), DuplicateNode> {
        let id = config.node_id.clone();
        self.nodes.register_node(config, client)?;
        self.queue.update_node(&id, false, crate::resources::ResourceVector::zero());
        self.next_heartbeat.insert(id.clone(), now);
        self.next_poll.insert(id, now);
        Ok(())
    }

    pub fn submit(&mut self, spec: WorkloadSpec, submitter: &str, now: Timestamp) -> Result<JobRecord, Rejection> {
        let job = self.gatekeeper.submit(spec, submitter, now)?;
        self.queue
            .enqueue(job.clone())
            .map_err(|_| Rejection::DuplicateWorkload(job.id().to_string()))?;
        self.submitted += 1;
        Ok(job)
    }

    /// Clones a session into a batch job and submits it as the session owner.
    pub fn clone_session(
        &mut self,
        session_id: &str,
        command: Vec<String>,
        offload_compatible: bool,
        now: Timestamp,
    ) -> Result<JobRecord, Rejection> {
        let spec = self.gatekeeper.clone_session(session_id, command, offload_compatible)?;
        let owner = spec.owner.clone();
        self.submit(spec, &owner, now)
    }

    fn bump_epoch(&mut self, id: &str) {
        *self.epochs.entry(id.to_string()).or_insert(0) += 1;
    }

    fn apply(&mut self, u: StateUpdate, node: Option<&str>, now: Timestamp, report: &mut StepReport) {
        match self.queue.apply_event(&u.job, u.event.clone(), now, &u.reason) {
            Ok(()) => {
                if u.event == JobEvent::Requeue {
                    match (u.reattach, node) {
                        (true, Some(n)) => {
                            self.queue.set_affinity(&u.job, n);
                            self.reattach_from.insert(u.job.clone(), n.to_string());
                        }
                        _ => self.bump_epoch(&u.job),
                    }
                }
                report.updates.push(u);
            }
            Err(e) => {
                tracing::warn!(job = %u.job, event = u.event.name(), "update refused: {e}");
                report.rejected_updates.push((u, e.to_string()));
            }
        }
    }

    fn sync_node_slot(&mut self, id: &str) {
        if let Some(n) = self.nodes.get(id) {
            let s = n.state();
            self.queue
                .update_node(id, n.is_ready(), s.advertised_capacity.clone());
        }
    }

    fn local_request(&self, job: &JobRecord) -> PluginJobRequest {
        let spec = &job.spec;
        let mut env = spec.env.clone();
        env.insert(EXPECTED_DURATION_ENV.to_string(), spec.expected_duration_s.to_string());
        // local runs get private secrets too; the store resolves everything here
        PluginJobRequest {
            job_id: plugin_job_id(job.id(), self.epoch(job.id())),
            image: spec.image.clone(),
            command: spec.command.clone(),
            env,
            resources: spec.demand.clone(),
            secret_bundle: self.gatekeeper.local_bundle(&spec.secret_refs),
            timeout_s: spec.expected_duration_s,
        }
    }

    fn start_local(&mut self, id: &str, now: Timestamp, report: &mut StepReport) {
        let job = self.queue.job(id).expect("just admitted").clone();
        let request = self.local_request(&job);
        match self.local_runtime.create(&request) {
            Ok(_) => {
                self.local_runs.insert(
                    id.to_string(),
                    LocalRun {
                        plugin_job_id: request.job_id,
                        started: false,
                    },
                );
            }
            Err(e) => self.apply(
                StateUpdate {
                    job: id.to_string(),
                    event: JobEvent::Fail,
                    reason: format!("local runtime refused the job: {e}"),
                    reattach: false,
                },
                None,
                now,
                report,
            ),
        }
    }

    fn poll_local(&mut self, now: Timestamp, report: &mut StepReport) {
        let ids: Vec<String> = self.local_runs.keys().cloned().collect();
        for id in ids {
            let run = self.local_runs[&id].clone();
            let Ok(doc) = self.local_runtime.status(&run.plugin_job_id) else {
                continue;
            };
            let mut events = Vec::new();
            match doc.state {
                RemoteState::Pending => {}
                RemoteState::Running => {
                    if !run.started {
                        events.push((JobEvent::Start, "running locally".to_string()));
                    }
                }
                RemoteState::Succeeded => {
                    if !run.started {
                        events.push((JobEvent::Start, "running locally".to_string()));
                    }
                    events.push((JobEvent::Succeed, format!("exit code {}", doc.exit_code.unwrap_or(0))));
                }
                RemoteState::Failed | RemoteState::Unknown => {
                    let code = doc.exit_code.map_or("none".to_string(), |c| c.to_string());
                    events.push((JobEvent::Fail, format!("local run failed, exit code {code}")));
                }
            }
            for (event, reason) in events {
                if event == JobEvent::Start {
                    if let Some(r) = self.local_runs.get_mut(&id) {
                        r.started = true;
                    }
                }
                let terminal = matches!(event, JobEvent::Succeed | JobEvent::Fail);
                self.apply(
                    StateUpdate {
                        job: id.clone(),
                        event,
                        reason,
                        reattach: false,
                    },
                    None,
                    now,
                    report,
                );
                if terminal {
                    self.local_runs.remove(&id);
                }
            }
        }
    }

    fn dispatch_remote(&mut self, id: &str, node_id: &str, reattached: bool, now: Timestamp, report: &mut StepReport) {
        if let Some(old) = self.reattach_from.remove(id) {
            if !(reattached && old == node_id) {
                // the backend job at `old` is abandoned: cancel it and start a new epoch
                let stale = plugin_job_id(id, self.epoch(id));
                if let Some(n) = self.nodes.get_mut(&old) {
                    let _ = n.client_mut().delete(&stale);
                }
                self.bump_epoch(id);
            }
        }
        let pid = plugin_job_id(id, self.epoch(id));
        let job = self.queue.job(id).expect("just admitted").clone();
        let node = self.nodes.get_mut(node_id).expect("queue only knows registered nodes");
        let result = node.dispatch(&job, &pid, &self.gatekeeper, now);
        let updates = match result {
            Ok(_) => return,
            Err(DispatchError::NodeNotReady(n)) => vec![
                StateUpdate {
                    job: id.to_string(),
                    event: JobEvent::LoseContact,
                    reason: format!("node {n} went away before dispatch"),
                    reattach: false,
                },
                StateUpdate {
                    job: id.to_string(),
                    event: JobEvent::Requeue,
                    reason: "requeued after failed dispatch".into(),
                    reattach: false,
                },
            ],
            Err(e) => vec![StateUpdate {
                job: id.to_string(),
                event: JobEvent::Fail,
                reason: e.to_string(),
                reattach: false,
            }],
        };
        for u in updates {
            self.apply(u, Some(node_id), now, report);
        }
    }

    /// One reconciliation pass: heartbeats, status polls, then admission.
    pub fn step(&mut self, now: Timestamp) -> StepReport {
        let mut report = StepReport::default();
        let node_ids: Vec<String> = self.nodes.iter().map(|n| n.id().to_string()).collect();

        for id in &node_ids {
            if self.next_heartbeat.get(id).is_some_and(|t| now >= *t) {
                let node = self.nodes.get_mut(id).expect("listed");
                let interval = node.config().heartbeat_interval_s as i64 * 1000;
                let out = node.heartbeat(now);
                self.next_heartbeat.insert(id.clone(), now.plus_millis(interval));
                self.sync_node_slot(id);
                for u in out.updates {
                    self.apply(u, Some(id), now, &mut report);
                }
            }
        }
        for id in &node_ids {
            if self.next_poll.get(id).is_some_and(|t| now >= *t) {
                let node = self.nodes.get_mut(id).expect("listed");
                let interval = node.config().poll_interval_s as i64 * 1000;
                let updates = node.poll_and_reconcile(now, &self.gatekeeper);
                self.next_poll.insert(id.clone(), now.plus_millis(interval));
                // a create failure streak may have taken the node down
                self.sync_node_slot(id);
                for u in updates {
                    self.apply(u, Some(id), now, &mut report);
                }
            }
        }
        self.poll_local(now, &mut report);

        let outcome = self.queue.admit_cycle(now);
        for victim in &outcome.evicted {
            if let Some(run) = self.local_runs.remove(victim) {
                let _ = self.local_runtime.delete(&run.plugin_job_id);
            }
            self.bump_epoch(victim);
        }
        let reattached: BTreeSet<String> = outcome.reattached.clone();
        for (id, decision) in &outcome.decisions {
            match decision {
                Decision::Local => {
                    if let Some(old) = self.reattach_from.remove(id) {
                        let stale = plugin_job_id(id, self.epoch(id));
                        if let Some(n) = self.nodes.get_mut(&old) {
                            let _ = n.client_mut().delete(&stale);
                        }
                        self.bump_epoch(id);
                    }
                    self.start_local(id, now, &mut report)
                }
                Decision::Remote(node) => self.dispatch_remote(id, node, reattached.contains(id), now, &mut report),
                Decision::Wait => {}
            }
        }
        report.decisions = outcome.decisions;
        report.evicted = outcome.evicted;
        report
    }

    /// Cancels a job wherever it is.
    pub fn cancel(&mut self, id: &str, now: Timestamp) -> Result<(), QueueError> {
        let job = self.queue.job(id).ok_or_else(|| QueueError::UnknownJob(id.to_string()))?;
        let remote = match &job.state {
            JobState::AdmittedRemote(n) => Some(n.clone()),
            JobState::Running | JobState::Unknown => job.assigned_site.clone(),
            _ => None,
        };
        self.queue.apply_event(id, JobEvent::Cancel, now, "cancelled")?;
        if let Some(run) = self.local_runs.remove(id) {
            let _ = self.local_runtime.delete(&run.plugin_job_id);
        }
        if let Some(n) = remote.and_then(|n| self.nodes.get_mut(&n)) {
            n.cancel(id);
        }
        Ok(())
    }
}

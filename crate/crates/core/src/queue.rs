//! The cluster queue: opportunistic local admission, eviction on contention
//! and routing of offload-compatible jobs to virtual nodes.
//!
//! All mutations go through `&mut self`; the owner runs it as a single-writer
//! loop. Interactive sessions are always considered before batch jobs, and a
//! session that does not fit evicts the youngest local batch jobs in the same
//! cycle.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IllegalTransition, JobEvent, JobRecord, JobState, PlacementHint, WorkloadSpec};
use crate::resources::{fits, ResourceVector};
use crate::time::Timestamp;

pub const DEFAULT_MIN_OFFLOAD_DURATION_S: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrder {
    #[default]
    RoundRobin,
    LeastLoaded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingPolicy {
    /// Jobs expected to run for less than this are never sent to a virtual node.
    pub min_offload_duration_s: u64,
    pub node_order: NodeOrder,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            min_offload_duration_s: DEFAULT_MIN_OFFLOAD_DURATION_S,
            node_order: NodeOrder::RoundRobin,
        }
    }
}

/// True iff the job may ever be placed on a virtual node.
pub fn route_remote_only(spec: &WorkloadSpec, policy: &RoutingPolicy) -> bool {
    spec.offload_compatible
        && !spec.is_interactive()
        && spec.expected_duration_s >= policy.min_offload_duration_s
        && spec.all_secrets_shareable()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Local,
    Remote(String),
    Wait,
}

pub const VICTIM_ORDER: &str = "youngest_admitted_first";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub trigger: String,
    pub victims: Vec<String>,
    pub freed: ResourceVector,
    pub victim_order: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvictionError {
    #[error("trigger already fits; nothing to evict")]
    NotContended,
    #[error("evicting every local batch job would not satisfy the demand")]
    Infeasible,
    #[error("only interactive sessions may trigger eviction")]
    NotInteractive,
    #[error("unknown job {0}")]
    UnknownJob(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("job {0} already enqueued")]
    DuplicateJob(String),
    #[error("job {0} is not in Queued state")]
    NotQueued(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("stale eviction plan: {0}")]
    StalePlan(String),
    #[error("demand of {0} does not fit")]
    NoCapacity(String),
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditKind {
    Decision { job: String, decision: Decision },
    Eviction { plan: EvictionPlan },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: AuditKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleOutcome {
    pub decisions: Vec<(String, Decision)>,
    pub plans: Vec<EvictionPlan>,
    /// Jobs evicted and requeued during this cycle.
    pub evicted: Vec<String>,
    /// Remote admissions that went back to the node the job was last seen on.
    pub reattached: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSlot {
    pub ready: bool,
    pub capacity: ResourceVector,
    pub allocated: ResourceVector,
    pub jobs: BTreeSet<String>,
}

#[derive(Debug, Clone)]
struct LocalAdmission {
    demand: ResourceVector,
    seq: u64,
    batch: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub submitted: u64,
    pub queued: u64,
    pub admitted_local: u64,
    pub admitted_remote: u64,
    pub running: u64,
    pub evicted: u64,
    pub unknown: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub cancelled: u64,
}

impl StateCounts {
    pub fn terminal(&self) -> u64 {
        self.succeeded + self.failed + self.cancelled
    }

    /// Admitted anywhere and not finished: the "running" side of the ledger.
    pub fn in_flight(&self) -> u64 {
        self.admitted_local + self.admitted_remote + self.running + self.unknown
    }

    /// submitted = queued + in flight + terminal + evicted-in-flight.
    pub fn balanced(&self) -> bool {
        self.submitted == self.queued + self.in_flight() + self.terminal() + self.evicted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub pending: Vec<String>,
    pub local_capacity: ResourceVector,
    pub local_allocated: ResourceVector,
    pub nodes: BTreeMap<String, NodeSlot>,
    pub counts: StateCounts,
    pub evicted_total: u64,
    pub running_by_site: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueConfig {
    pub local_capacity: ResourceVector,
    pub routing: RoutingPolicy,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            local_capacity: crate::fixtures::server1(),
            routing: RoutingPolicy::default(),
        }
    }
}

pub struct ClusterQueue {
    config: QueueConfig,
    jobs: BTreeMap<String, JobRecord>,
    /// (class, enqueue seq, id); class 0 = interactive, 1 = batch
    pending: BTreeSet<(u8, u64, String)>,
    seniority: BTreeMap<String, u64>,
    next_seq: u64,
    local: BTreeMap<String, LocalAdmission>,
    local_allocated: ResourceVector,
    next_admit_seq: u64,
    nodes: BTreeMap<String, NodeSlot>,
    remote: BTreeMap<String, (String, ResourceVector)>,
    affinity: BTreeMap<String, String>,
    rr_cursor: usize,
    audit: Vec<AuditRecord>,
    evicted_total: u64,
}

fn class_of(spec: &WorkloadSpec) -> u8 {
    if spec.is_interactive() {
        0
    } else {
        1
    }
}

impl ClusterQueue {
    pub fn new(config: QueueConfig) -> Self {
        ClusterQueue {
            config,
            jobs: BTreeMap::new(),
            pending: BTreeSet::new(),
            seniority: BTreeMap::new(),
            next_seq: 0,
            local: BTreeMap::new(),
            local_allocated: ResourceVector::zero(),
            next_admit_seq: 0,
            nodes: BTreeMap::new(),
            remote: BTreeMap::new(),
            affinity: BTreeMap::new(),
            rr_cursor: 0,
            audit: Vec::new(),
            evicted_total: 0,
        }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn local_capacity(&self) -> &ResourceVector {
        &self.config.local_capacity
    }

    pub fn local_allocated(&self) -> &ResourceVector {
        &self.local_allocated
    }

    pub fn free_local(&self) -> ResourceVector {
        self.config
            .local_capacity
            .checked_sub(&self.local_allocated)
            .expect("local allocation never exceeds capacity")
    }

    pub fn evicted_total(&self) -> u64 {
        self.evicted_total
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn decisions_since(&self, since: Timestamp) -> Vec<AuditRecord> {
        self.audit.iter().filter(|r| r.at >= since).cloned().collect()
    }

    pub fn nodes(&self) -> &BTreeMap<String, NodeSlot> {
        &self.nodes
    }

    /// Scheduling order of pending jobs: interactive first, then by enqueue time.
    pub fn scheduling_order(&self) -> Vec<String> {
        self.pending.iter().map(|(_, _, id)| id.clone()).collect()
    }

    /// Adds a Queued job. Returns its position in scheduling order.
    pub fn enqueue(&mut self, job: JobRecord) -> Result<usize, QueueError> {
        let id = job.id().to_string();
        if self.jobs.contains_key(&id) {
            return Err(QueueError::DuplicateJob(id));
        }
        if job.state != JobState::Queued {
            return Err(QueueError::NotQueued(id));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let key = (class_of(&job.spec), seq, id.clone());
        self.seniority.insert(id.clone(), seq);
        self.pending.insert(key.clone());
        self.jobs.insert(id, job);
        Ok(self.pending.range(..&key).count())
    }

    /// Registers or refreshes a virtual node's readiness and advertised capacity.
    pub fn update_node(&mut self, node: &str, ready: bool, capacity: ResourceVector) {
        let slot = self.nodes.entry(node.to_string()).or_insert_with(|| NodeSlot {
            ready,
            capacity: ResourceVector::zero(),
            allocated: ResourceVector::zero(),
            jobs: BTreeSet::new(),
        });
        slot.ready = ready;
        slot.capacity = capacity;
    }

    /// Prefer `node` the next time `job` is admitted remotely.
    pub fn set_affinity(&mut self, job: &str, node: &str) {
        self.affinity.insert(job.to_string(), node.to_string());
    }

    pub fn counts(&self) -> StateCounts {
        let mut c = StateCounts {
            submitted: self.jobs.len() as u64,
            ..Default::default()
        };
        for j in self.jobs.values() {
            match j.state {
                JobState::Queued => c.queued += 1,
                JobState::AdmittedLocal => c.admitted_local += 1,
                JobState::AdmittedRemote(_) => c.admitted_remote += 1,
                JobState::Running => c.running += 1,
                JobState::Evicted => c.evicted += 1,
                JobState::Unknown => c.unknown += 1,
                JobState::Succeeded => c.succeeded += 1,
                JobState::Failed => c.failed += 1,
                JobState::Cancelled => c.cancelled += 1,
            }
        }
        c
    }

    /// Jobs in Running state, per assigned site.
    pub fn running_by_site(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for j in self.jobs.values() {
            if j.state == JobState::Running {
                if let Some(site) = &j.assigned_site {
                    *out.entry(site.clone()).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            pending: self.scheduling_order(),
            local_capacity: self.config.local_capacity.clone(),
            local_allocated: self.local_allocated.clone(),
            nodes: self.nodes.clone(),
            counts: self.counts(),
            evicted_total: self.evicted_total,
            running_by_site: self.running_by_site(),
        }
    }

    /// Applies a lifecycle event and keeps allocations and the pending set in step.
    pub fn apply_event(&mut self, id: &str, event: JobEvent, now: Timestamp, reason: &str) -> Result<(), QueueError> {
        let job = self.jobs.get(id).ok_or_else(|| QueueError::UnknownJob(id.to_string()))?;
        let demand = job.spec.demand.clone();
        let batch = !job.spec.is_interactive();
        let class = class_of(&job.spec);
        match &event {
            JobEvent::AdmitLocal if !fits(&demand, &self.free_local()) => {
                return Err(QueueError::NoCapacity(id.to_string()))
            }
            JobEvent::AdmitRemote(node) => {
                let ok = self.nodes.get(node).is_some_and(|slot| {
                    slot.capacity
                        .checked_sub(&slot.allocated)
                        .is_ok_and(|free| fits(&demand, &free))
                });
                if !ok {
                    return Err(QueueError::NoCapacity(id.to_string()));
                }
            }
            _ => {}
        }

        let job = self.jobs.get_mut(id).expect("checked above");
        let old = job.state.clone();
        job.apply(&event, now, reason)?;
        let new = job.state.clone();
        let seq = self.seniority[id];

        match &event {
            JobEvent::AdmitLocal => {
                self.local_allocated = self.local_allocated.checked_add(&demand);
                self.local.insert(
                    id.to_string(),
                    LocalAdmission {
                        demand: demand.clone(),
                        seq: self.next_admit_seq,
                        batch,
                    },
                );
                self.next_admit_seq += 1;
            }
            JobEvent::AdmitRemote(node) => {
                let slot = self.nodes.get_mut(node).expect("checked above");
                slot.allocated = slot.allocated.checked_add(&demand);
                slot.jobs.insert(id.to_string());
                self.remote.insert(id.to_string(), (node.clone(), demand.clone()));
            }
            JobEvent::Evict => self.evicted_total += 1,
            _ => {}
        }

        if old == JobState::Queued && new != JobState::Queued {
            self.pending.remove(&(class, seq, id.to_string()));
        }
        if new.is_terminal() || new == JobState::Evicted || new == JobState::Queued {
            if let Some(adm) = self.local.remove(id) {
                self.local_allocated = self
                    .local_allocated
                    .checked_sub(&adm.demand)
                    .expect("released demand was allocated");
            }
            if let Some((node, d)) = self.remote.remove(id) {
                if let Some(slot) = self.nodes.get_mut(&node) {
                    slot.allocated = slot.allocated.checked_sub(&d).expect("released demand was allocated");
                    slot.jobs.remove(id);
                }
            }
        }
        if new == JobState::Queued {
            self.pending.insert((class, seq, id.to_string()));
        }
        if new.is_terminal() {
            self.affinity.remove(id);
        }
        Ok(())
    }

    fn local_batch_victims(&self) -> Vec<(&String, &LocalAdmission)> {
        let mut v: Vec<_> = self
            .local
            .iter()
            .filter(|(id, adm)| {
                adm.batch
                    && matches!(
                        self.jobs[*id].state,
                        JobState::AdmittedLocal | JobState::Running
                    )
            })
            .collect();
        v.sort_by(|a, b| b.1.seq.cmp(&a.1.seq));
        v
    }

    /// Youngest-admitted-first victims until the trigger fits.
    pub fn compute_eviction_plan(&self, trigger: &str) -> Result<EvictionPlan, EvictionError> {
        let job = self
            .jobs
            .get(trigger)
            .ok_or_else(|| EvictionError::UnknownJob(trigger.to_string()))?;
        if !job.spec.is_interactive() {
            return Err(EvictionError::NotInteractive);
        }
        let free = self.free_local();
        let demand = &job.spec.demand;
        if fits(demand, &free) {
            return Err(EvictionError::NotContended);
        }
        let mut freed = ResourceVector::zero();
        let mut victims = Vec::new();
        for (id, adm) in self.local_batch_victims() {
            freed = freed.checked_add(&adm.demand);
            victims.push(id.clone());
            if fits(demand, &free.checked_add(&freed)) {
                return Ok(EvictionPlan {
                    trigger: trigger.to_string(),
                    victims,
                    freed,
                    victim_order: VICTIM_ORDER.to_string(),
                });
            }
        }
        Err(EvictionError::Infeasible)
    }

    /// Evicts and requeues every victim, then admits the trigger locally.
    pub fn apply_eviction(&mut self, plan: &EvictionPlan, now: Timestamp) -> Result<Vec<String>, QueueError> {
        if plan.victims.is_empty() {
            return Ok(Vec::new());
        }
        let stale = |why: String| Err(QueueError::StalePlan(why));
        let Some(trigger) = self.jobs.get(&plan.trigger) else {
            return stale(format!("trigger {} unknown", plan.trigger));
        };
        if trigger.state != JobState::Queued {
            return stale(format!("trigger {} is {}", plan.trigger, trigger.state));
        }
        let mut freed = ResourceVector::zero();
        for v in &plan.victims {
            let ok = self.local.get(v).is_some_and(|adm| adm.batch)
                && self
                    .jobs
                    .get(v)
                    .is_some_and(|j| matches!(j.state, JobState::AdmittedLocal | JobState::Running));
            if !ok {
                let state = self.jobs.get(v).map(|j| j.state.to_string()).unwrap_or_default();
                return stale(format!("victim {v} is no longer a local batch job ({state})"));
            }
            freed = freed.checked_add(&self.local[v].demand);
        }
        if freed != plan.freed || !fits(&trigger.spec.demand, &self.free_local().checked_add(&freed)) {
            return stale("capacity changed since the plan was computed".into());
        }

        let reason = format!("evicted for interactive session {}", plan.trigger);
        for v in &plan.victims {
            self.apply_event(v, JobEvent::Evict, now, &reason)?;
            self.apply_event(v, JobEvent::Requeue, now, &reason)?;
        }
        self.apply_event(&plan.trigger, JobEvent::AdmitLocal, now, "admitted after eviction")?;
        self.audit.push(AuditRecord {
            at: now,
            kind: AuditKind::Eviction { plan: plan.clone() },
        });
        Ok(plan.victims.clone())
    }

    fn pick_node(&mut self, id: &str, demand: &ResourceVector) -> Option<String> {
        let candidates: Vec<&String> = self
            .nodes
            .iter()
            .filter(|(_, s)| {
                s.ready
                    && !s.capacity.is_zero()
                    && s.capacity
                        .checked_sub(&s.allocated)
                        .is_ok_and(|free| fits(demand, &free))
            })
            .map(|(n, _)| n)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        if let Some(pref) = self.affinity.get(id) {
            if candidates.contains(&pref) {
                return Some(pref.clone());
            }
        }
        match self.config.routing.node_order {
            NodeOrder::RoundRobin => {
                let names: Vec<&String> = self.nodes.keys().collect();
                let n = names.len();
                for k in 0..n {
                    let idx = (self.rr_cursor + k) % n;
                    if candidates.contains(&names[idx]) {
                        self.rr_cursor = idx + 1;
                        return Some(names[idx].clone());
                    }
                }
                None
            }
            NodeOrder::LeastLoaded => candidates
                .into_iter()
                .min_by(|a, b| {
                    let (sa, sb) = (&self.nodes[*a], &self.nodes[*b]);
                    // allocated/capacity on cpu, compared without floats
                    let la = sa.allocated.cpu_millicores as u128 * sb.capacity.cpu_millicores.max(1) as u128;
                    let lb = sb.allocated.cpu_millicores as u128 * sa.capacity.cpu_millicores.max(1) as u128;
                    la.cmp(&lb).then(sa.jobs.len().cmp(&sb.jobs.len())).then(a.cmp(b))
                })
                .cloned(),
        }
    }

    fn record(&mut self, now: Timestamp, job: &str, decision: &Decision) {
        self.audit.push(AuditRecord {
            at: now,
            kind: AuditKind::Decision {
                job: job.to_string(),
                decision: decision.clone(),
            },
        });
    }

    /// One admission pass over the pending queue.
    pub fn admit_cycle(&mut self, now: Timestamp) -> CycleOutcome {
        let mut out = CycleOutcome::default();
        let order: Vec<(u8, u64, String)> = self.pending.iter().cloned().collect();
        for key in order {
            if !self.pending.contains(&key) {
                continue;
            }
            let id = key.2;
            let spec = self.jobs[&id].spec.clone();
            let decision = if spec.is_interactive() {
                self.admit_interactive(&id, &spec, now, &mut out)
            } else {
                self.admit_batch(&id, &spec, now, &mut out)
            };
            if decision != Decision::Wait {
                self.record(now, &id, &decision);
            }
            out.decisions.push((id, decision));
        }
        out
    }

    fn admit_interactive(&mut self, id: &str, spec: &WorkloadSpec, now: Timestamp, out: &mut CycleOutcome) -> Decision {
        if fits(&spec.demand, &self.free_local()) {
            self.apply_event(id, JobEvent::AdmitLocal, now, "fits local capacity")
                .expect("fit checked");
            return Decision::Local;
        }
        match self.compute_eviction_plan(id) {
            Ok(plan) => {
                let evicted = self.apply_eviction(&plan, now).expect("plan computed against current state");
                out.evicted.extend(evicted);
                out.plans.push(plan);
                Decision::Local
            }
            Err(_) => Decision::Wait,
        }
    }

    fn admit_batch(&mut self, id: &str, spec: &WorkloadSpec, now: Timestamp, out: &mut CycleOutcome) -> Decision {
        let remote_ok = route_remote_only(spec, &self.config.routing);
        let fits_local = fits(&spec.demand, &self.free_local());
        let try_remote_first = remote_ok && (spec.placement == PlacementHint::PreferRemote || !fits_local);
        if try_remote_first {
            if let Some(node) = self.pick_node(id, &spec.demand) {
                if self.affinity.remove(id).as_deref() == Some(node.as_str()) {
                    out.reattached.insert(id.to_string());
                }
                self.apply_event(id, JobEvent::AdmitRemote(node.clone()), now, "routed to virtual node")
                    .expect("capacity checked");
                return Decision::Remote(node);
            }
        }
        if fits_local {
            self.apply_event(id, JobEvent::AdmitLocal, now, "fits local capacity")
                .expect("fit checked");
            return Decision::Local;
        }
        Decision::Wait
    }

    pub fn is_local(&self, id: &str) -> bool {
        self.local.contains_key(id)
    }
}

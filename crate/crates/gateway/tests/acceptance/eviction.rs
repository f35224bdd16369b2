//! Randomized contention: a session arrives while local batch jobs hold the
//! capacity it needs.

use std::collections::{BTreeMap, BTreeSet};

use offload_core::fixtures::server1;
use offload_core::model::{JobEvent, JobRecord, JobState};
use offload_core::queue::{AuditKind, ClusterQueue, Decision, QueueConfig};
use offload_core::{ResourceVector, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::{add, random_demand, random_spec, sub, within, CapacityLedger, Outcome};

const SCENARIOS: u64 = 1000;

/// Local batch jobs ordered oldest admission first, rebuilt from the audit log.
fn admission_order(q: &ClusterQueue) -> Vec<String> {
    let mut last: BTreeMap<String, usize> = BTreeMap::new();
    for (i, rec) in q.audit().iter().enumerate() {
        if let AuditKind::Decision { job, decision: Decision::Local } = &rec.kind {
            last.insert(job.clone(), i);
        }
        if let AuditKind::Eviction { plan } = &rec.kind {
            last.insert(plan.trigger.clone(), i);
        }
    }
    let mut batch: Vec<(usize, String)> = q
        .jobs()
        .filter(|j| !j.spec.is_interactive() && matches!(j.state, JobState::AdmittedLocal | JobState::Running))
        .map(|j| (last[j.id()], j.id().to_string()))
        .collect();
    batch.sort();
    batch.into_iter().map(|(_, id)| id).collect()
}

enum Expected {
    NoEviction,
    Evict(BTreeSet<String>),
    Infeasible,
}

/// Smallest set of youngest admissions whose removal lets `demand` fit.
fn suffix_oracle(q: &ClusterQueue, capacity: &ResourceVector, demand: &ResourceVector) -> Expected {
    let held = q
        .jobs()
        .filter(|j| q.is_local(j.id()) && matches!(j.state, JobState::AdmittedLocal | JobState::Running))
        .fold(ResourceVector::zero(), |acc, j| add(&acc, &j.spec.demand));
    let free = sub(capacity, &held);
    if within(demand, &free) {
        return Expected::NoEviction;
    }
    let order = admission_order(q);
    for k in 1..=order.len() {
        let victims = &order[order.len() - k..];
        let freed = victims
            .iter()
            .fold(ResourceVector::zero(), |acc, id| add(&acc, &q.job(id).unwrap().spec.demand));
        if within(demand, &add(&free, &freed)) {
            return Expected::Evict(victims.iter().cloned().collect());
        }
    }
    Expected::Infeasible
}

pub fn run(ledger: &mut CapacityLedger) -> Outcome {
    let mut counts = [0u64; 3];
    let mut failures = Vec::new();

    for s in 0..SCENARIOS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE71C7 + s);
        let capacity = server1();
        let mut q = ClusterQueue::new(QueueConfig {
            local_capacity: capacity.clone(),
            ..Default::default()
        });
        let mut now = Timestamp::from_secs(0);
        let mut n = 0;
        let mut id = |prefix: &str| {
            n += 1;
            format!("{prefix}{n}")
        };

        // earlier sessions are not evictable and pin part of the pool
        for _ in 0..rng.random_range(0..=2) {
            let mut spec = random_spec(&mut rng, id("old-nb"), true);
            spec.demand = random_demand(&mut rng, 12);
            q.enqueue(JobRecord::new(spec, now)).unwrap();
        }
        for _ in 0..rng.random_range(1..=4) {
            for _ in 0..rng.random_range(2..=8) {
                let mut spec = random_spec(&mut rng, id("b"), false);
                spec.offload_compatible = false;
                spec.demand = random_demand(&mut rng, 16);
                q.enqueue(JobRecord::new(spec, now)).unwrap();
            }
            q.admit_cycle(now);
            ledger.record("eviction harness", q.local_allocated(), &capacity);
            let local: Vec<String> = q
                .jobs()
                .filter(|j| matches!(j.state, JobState::AdmittedLocal))
                .map(|j| j.id().to_string())
                .collect();
            for j in local {
                q.apply_event(&j, JobEvent::Start, now, "started").unwrap();
            }
            let running: Vec<String> = q
                .jobs()
                .filter(|j| j.state == JobState::Running && !j.spec.is_interactive())
                .map(|j| j.id().to_string())
                .collect();
            for j in running {
                if rng.random_bool(0.2) {
                    q.apply_event(&j, JobEvent::Succeed, now, "done").unwrap();
                }
            }
            now = now.plus_secs(10);
        }

        let trigger = id("nb");
        let mut spec = random_spec(&mut rng, trigger.clone(), true);
        let max = if rng.random_bool(0.1) { 96 } else { 40 };
        spec.demand = random_demand(&mut rng, max);
        q.enqueue(JobRecord::new(spec.clone(), now)).unwrap();
        let expected = suffix_oracle(&q, &capacity, &spec.demand);

        let outcome = q.admit_cycle(now);
        ledger.record("eviction harness", q.local_allocated(), &capacity);
        let decision = outcome
            .decisions
            .iter()
            .find(|(j, _)| *j == trigger)
            .map(|(_, d)| d.clone());
        let evicted: BTreeSet<String> = outcome.evicted.iter().cloned().collect();
        let state = q.job(&trigger).unwrap().state.clone();
        let problem = match &expected {
            Expected::NoEviction => {
                counts[0] += 1;
                (decision != Some(Decision::Local) || !evicted.is_empty() || state != JobState::AdmittedLocal)
                    .then(|| format!("fits outright but got {decision:?}, evicted {evicted:?}"))
            }
            Expected::Evict(victims) => {
                counts[1] += 1;
                if decision != Some(Decision::Local) || state != JobState::AdmittedLocal {
                    Some(format!("feasible spawn not admitted in the same cycle: {decision:?}"))
                } else if &evicted != victims {
                    Some(format!("plan {evicted:?} differs from minimal suffix {victims:?}"))
                } else {
                    None
                }
            }
            Expected::Infeasible => {
                counts[2] += 1;
                (decision != Some(Decision::Wait) || !evicted.is_empty())
                    .then(|| format!("infeasible spawn got {decision:?}, evicted {evicted:?}"))
            }
        };
        if let Some(p) = problem {
            failures.push(format!("scenario {s}: {p}"));
        }
    }
    let detail = format!(
        "{SCENARIOS} scenarios ({} fit outright, {} needed eviction, {} infeasible), {} mismatches",
        counts[0],
        counts[1],
        counts[2],
        failures.len()
    );
    match failures.first() {
        None if counts[1] > 0 => Outcome::pass(detail),
        None => Outcome::fail(format!("{detail}; no scenario exercised eviction")),
        Some(f) => Outcome::fail(format!("{detail}; first: {f}")),
    }
}

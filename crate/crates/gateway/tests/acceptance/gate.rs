//! Randomized admission cycles with flagged and unflagged batch jobs.

use offload_core::fixtures::server1;
use offload_core::model::{JobEvent, JobRecord, JobState};
use offload_core::queue::{ClusterQueue, Decision, NodeOrder, QueueConfig, RoutingPolicy};
use offload_core::{ResourceVector, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::{random_spec, CapacityLedger, Outcome};

const RUNS: u64 = 100;
const CYCLES_PER_RUN: u64 = 100;

pub fn run(ledger: &mut CapacityLedger) -> Outcome {
    let mut cycles = 0u64;
    let mut remote_admissions = 0u64;
    let mut unflagged_seen = 0u64;
    let mut violations: Vec<String> = Vec::new();

    for run in 0..RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE + run);
        let routing = RoutingPolicy {
            min_offload_duration_s: 60,
            node_order: if rng.random_bool(0.5) { NodeOrder::RoundRobin } else { NodeOrder::LeastLoaded },
        };
        let capacity = server1();
        let mut q = ClusterQueue::new(QueueConfig {
            local_capacity: capacity.clone(),
            routing,
        });
        let node_names: Vec<String> = (0..rng.random_range(1..=4)).map(|i| format!("vn{i}")).collect();
        let mut next_id = 0u64;

        for cycle in 0..CYCLES_PER_RUN {
            let now = Timestamp::from_secs((run * CYCLES_PER_RUN + cycle) as i64 * 10);
            for n in &node_names {
                if rng.random_bool(0.3) {
                    let cap = if rng.random_bool(0.1) {
                        ResourceVector::zero()
                    } else {
                        ResourceVector::cores(rng.random_range(8..256))
                            .with_memory_gb(rng.random_range(32..1024))
                            .with_gpu("T4", rng.random_range(0..4))
                    };
                    q.update_node(n, rng.random_bool(0.85), cap);
                }
            }
            for _ in 0..rng.random_range(0..=5) {
                next_id += 1;
                let interactive = rng.random_bool(0.08);
                let spec = random_spec(&mut rng, format!("r{run}-j{next_id}"), interactive);
                if !spec.offload_compatible {
                    unflagged_seen += 1;
                }
                q.enqueue(JobRecord::new(spec, now)).expect("fresh id");
            }

            let outcome = q.admit_cycle(now);
            cycles += 1;
            for (id, decision) in &outcome.decisions {
                if let Decision::Remote(node) = decision {
                    remote_admissions += 1;
                    let spec = &q.job(id).expect("decided job exists").spec;
                    if !spec.offload_compatible {
                        violations.push(format!("unflagged {id} admitted to {node}"));
                    }
                }
            }
            for j in q.jobs() {
                if !j.spec.offload_compatible
                    && j.state_history.iter().any(|c| matches!(c.state, JobState::AdmittedRemote(_)))
                {
                    violations.push(format!("unflagged {} has an AdmittedRemote history entry", j.id()));
                }
            }
            ledger.record("gate harness", q.local_allocated(), &capacity);

            // move some jobs along so capacity keeps turning over
            let ids: Vec<(String, JobState)> = q.jobs().map(|j| (j.id().to_string(), j.state.clone())).collect();
            for (id, state) in ids {
                let event = match state {
                    JobState::AdmittedLocal | JobState::AdmittedRemote(_) if rng.random_bool(0.6) => JobEvent::Start,
                    JobState::AdmittedRemote(_) if rng.random_bool(0.05) => JobEvent::LoseContact,
                    JobState::Running if rng.random_bool(0.15) => {
                        if rng.random_bool(0.9) {
                            JobEvent::Succeed
                        } else {
                            JobEvent::Fail
                        }
                    }
                    JobState::Running if rng.random_bool(0.03) => JobEvent::LoseContact,
                    JobState::Unknown => JobEvent::Requeue,
                    JobState::Queued if rng.random_bool(0.01) => JobEvent::Cancel,
                    _ => continue,
                };
                let _ = q.apply_event(&id, event, now, "harness");
            }
        }
    }
    violations.dedup();
    let detail = format!(
        "{cycles} cycles, {unflagged_seen} unflagged jobs, {remote_admissions} remote admissions, {} unflagged remote",
        violations.len()
    );
    if cycles < 10_000 || remote_admissions == 0 {
        return Outcome::fail(format!("only {detail}"));
    }
    match violations.first() {
        None => Outcome::pass(detail),
        Some(v) => Outcome::fail(format!("{detail}; first: {v}")),
    }
}

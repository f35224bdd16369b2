//! Lossy plugin transport: one call in five is dropped, either before the
//! plugin sees it or after it has acted.

use std::sync::OnceLock;

use offload_core::model::JobState;
use offload_core::scenario::{run_scenario, ScenarioConfig, ScenarioRun};

use super::common::{CapacityLedger, Outcome};

pub const DROP_RATE: f64 = 0.2;

const SCENARIO: &str = r#"
duration_s = 14400
tick_s = 10
seed = 11
transport_drop_rate = 0.2
local_capacity = { cpu_millicores = 8000, memory_bytes = 32000000000 }
routing = { min_offload_duration_s = 60, node_order = "round_robin" }
node = { heartbeat_interval_s = 10, ttl_s = 30, poll_interval_s = 10, max_retries = 5 }

[[groups]]
group = "batch"
members = ["prod"]
quota = { cpu_millicores = 8000, memory_bytes = 32000000000 }
offload_allowed = true

[[sites]]
site = "condor"
slots = 64
queue_delay = { kind = "fixed", seconds = 30 }
failure_prob = 0.02
seed = 1

[[sites]]
site = "slurm"
slots = 48
queue_delay = { kind = "lognormal", mu = 4.0, sigma = 1.0 }
failure_prob = 0.02
seed = 2

[[sites]]
site = "podman"
slots = 16
queue_delay = { kind = "fixed", seconds = 5 }
seed = 3

[[arrivals]]
start_s = 0
end_s = 10800
rate_per_min = 6.5
offload_fraction = 0.95
duration_jitter = 0.5
[arrivals.template]
workload_id = "sim"
owner = "prod"
group = "batch"
image = "registry.local/sim:1"
command = ["simulate"]
demand = { cpu_millicores = 1000, memory_bytes = 2000000000 }
expected_duration_s = 600
kind = "batch_job"
"#;

pub fn config() -> ScenarioConfig {
    let cfg = ScenarioConfig::from_toml(SCENARIO).unwrap();
    assert_eq!(cfg.transport_drop_rate, DROP_RATE);
    cfg
}

/// Shared with the ledger check so the run is done once.
pub fn fault_run() -> &'static ScenarioRun {
    static RUN: OnceLock<ScenarioRun> = OnceLock::new();
    RUN.get_or_init(|| run_scenario(&config()).unwrap())
}

pub fn run(_: &mut CapacityLedger) -> Outcome {
    let cfg = config();
    let budget_ms = cfg.node.max_retries as i64 * cfg.node.poll_interval_s as i64 * 1000;
    let run = fault_run();

    let mut dispatched = 0;
    let mut episodes = 0;
    let mut longest_ms = 0i64;
    let mut problems = Vec::new();
    for job in &run.jobs {
        let h = &job.state_history;
        if !h.iter().any(|c| matches!(c.state, JobState::AdmittedRemote(_))) {
            continue;
        }
        dispatched += 1;
        for (i, change) in h.iter().enumerate() {
            if change.state != JobState::Unknown {
                continue;
            }
            episodes += 1;
            match h.get(i + 1) {
                Some(next) => {
                    let dt = next.at.millis_since(change.at);
                    longest_ms = longest_ms.max(dt);
                    if dt > budget_ms || !(next.state.is_terminal() || next.state == JobState::Queued) {
                        problems.push(format!("{} left Unknown for {} after {dt} ms", job.id(), next.state));
                    }
                }
                None => problems.push(format!("{} stuck in Unknown since {}", job.id(), change.at)),
            }
        }
        // still in flight when the run stops is fine; parked in Unknown is not
        if matches!(job.state, JobState::Unknown | JobState::Evicted) {
            problems.push(format!("{} ended in {}", job.id(), job.state));
        }
    }
    let detail = format!(
        "{dispatched} dispatched jobs, {episodes} Unknown episodes, longest {:.0}s (budget {}s), {} problems",
        longest_ms as f64 / 1000.0,
        budget_ms / 1000,
        problems.len()
    );
    if dispatched < 1000 {
        return Outcome::fail(format!("{detail}; fewer than 1000 dispatched"));
    }
    if episodes == 0 {
        return Outcome::fail(format!("{detail}; faults never exercised the Unknown path"));
    }
    match problems.first() {
        None => Outcome::pass(detail),
        Some(p) => Outcome::fail(format!("{detail}; first: {p}")),
    }
}

//! wasm entry points for the static demo page in `www/`.

use offload_core::model::JobState;
use offload_core::scenario::{emit_plot_data, run_scenario, ScenarioConfig, StackedSeries, Summary, SCALING_SCENARIO};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const SCALING: &str = SCALING_SCENARIO;

#[derive(Serialize)]
pub struct SimulateOutput {
    pub summary: Summary,
    pub plot: StackedSeries,
}

#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct EvictionPlan {
    /// Batch jobs evicted when the session arrived, youngest first.
    pub evicted: Vec<String>,
    pub session_running: bool,
    pub batch_running: Vec<String>,
}

pub fn simulate_json(scenario_toml: &str, seed: Option<u64>) -> Result<String, String> {
    let mut cfg = ScenarioConfig::from_toml(scenario_toml).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let run = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let plot = emit_plot_data(&run.csv).map_err(|e| e.to_string())?;
    serde_json::to_string(&SimulateOutput { summary: run.summary, plot }).map_err(|e| e.to_string())
}

fn eviction_toml(capacity_cores: u32, job_cores: &[u32], session_cores: u32) -> String {
    let mut text = format!(
        r#"
duration_s = {end}
tick_s = 10
seed = 1
local_capacity = {{ cpu_millicores = {cap}, memory_bytes = 1000000000000 }}
arrivals = []
sites = []

[[groups]]
group = "g"
members = ["batch", "analyst"]
quota = {{ cpu_millicores = 1000000, memory_bytes = 1000000000000 }}
"#,
        end = 10 * job_cores.len() + 60,
        cap = capacity_cores as u64 * 1000,
    );
    for (i, cores) in job_cores.iter().enumerate() {
        text.push_str(&format!(
            r#"
[[batch_events]]
at_s = {at}
[batch_events.spec]
workload_id = "job{n}"
owner = "batch"
group = "g"
image = "busybox"
command = ["sleep", "86400"]
demand = {{ cpu_millicores = {m}, memory_bytes = 1000000000 }}
expected_duration_s = 86400
kind = "batch_job"
"#,
            at = 10 * i,
            n = i + 1,
            m = *cores as u64 * 1000,
        ));
    }
    text.push_str(&format!(
        r#"
[[session_events]]
at_s = {at}
[session_events.spec]
workload_id = "session"
owner = "analyst"
group = "g"
image = "notebook"
command = ["jupyterhub-singleuser"]
demand = {{ cpu_millicores = {m}, memory_bytes = 1000000000 }}
expected_duration_s = 86400
uses_local_storage = true
kind = "interactive_session"
"#,
        at = 10 * job_cores.len() + 20,
        m = session_cores as u64 * 1000,
    ));
    text
}

/// Admits the batch jobs one per tick, then spawns a session and reports
/// which jobs made room for it.
pub fn eviction_plan_for(capacity_cores: u32, job_cores: &[u32], session_cores: u32) -> Result<EvictionPlan, String> {
    if capacity_cores == 0 || session_cores == 0 || job_cores.iter().any(|c| *c == 0) {
        return Err("core counts must be positive".into());
    }
    let cfg = ScenarioConfig::from_toml(&eviction_toml(capacity_cores, job_cores, session_cores)).map_err(|e| e.to_string())?;
    let run = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let mut evicted: Vec<String> = Vec::new();
    let mut batch_running = Vec::new();
    let mut session_running = false;
    for job in &run.jobs {
        if job.id() == "session" {
            session_running = job.state == JobState::Running;
            continue;
        }
        if job.eviction_count > 0 {
            evicted.push(job.id().to_string());
        }
        if job.state == JobState::Running {
            batch_running.push(job.id().to_string());
        }
    }
    // newest admission first
    evicted.sort_by_key(|id| std::cmp::Reverse(id[3..].parse::<usize>().unwrap_or(0)));
    Ok(EvictionPlan {
        evicted,
        session_running,
        batch_running,
    })
}

#[wasm_bindgen]
pub fn scaling_scenario() -> String {
    SCALING_SCENARIO.to_string()
}

/// Runs a scenario TOML and returns `{summary, plot}` as JSON.
#[wasm_bindgen]
pub fn simulate(scenario_toml: &str, seed: Option<u64>) -> Result<String, JsValue> {
    simulate_json(scenario_toml, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn eviction_plan(capacity_cores: u32, job_cores: Vec<u32>, session_cores: u32) -> Result<String, JsValue> {
    let plan = eviction_plan_for(capacity_cores, &job_cores, session_cores).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&plan).map_err(|e| JsValue::from_str(&e.to_string()))
}

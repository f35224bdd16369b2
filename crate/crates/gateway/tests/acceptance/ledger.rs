//! Conservation and accounting over several scenario runs, and capacity safety.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::{Arc, Mutex};

use offload_core::fixtures::server1;
use offload_core::gatekeeper::{Gatekeeper, GatekeeperConfig, GroupPolicy, PolicySet, SecretStore};
use offload_core::model::{JobRecord, JobState};
use offload_core::platform::Platform;
use offload_core::plugin::client::{Loopback, PluginClient, ProtocolClient};
use offload_core::plugin::sim::{DelayModel, SimulatedSite, SiteModel};
use offload_core::queue::QueueConfig;
use offload_core::scenario::{parse_csv, run_scenario, ScenarioConfig, ScenarioRun, TickRow, SCALING_SCENARIO};
use offload_core::vnode::NodeConfig;
use offload_core::{ManualClock, ResourceVector, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::{add, random_spec, within, CapacityLedger, Outcome};
use super::{faults, scaling};

const REL_TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs()).max(1.0)
}

fn state_at(job: &JobRecord, t_ms: i64) -> Option<&JobState> {
    job.state_history.iter().take_while(|c| c.at.as_millis() <= t_ms).last().map(|c| &c.state)
}

/// Checks one run; returns a short tag on success.
fn check_run(name: &str, cfg: &ScenarioConfig, run: &ScenarioRun) -> Result<String, String> {
    let s = &run.summary;
    if s.conservation_violations != 0 {
        return Err(format!("{name}: {} ticks broke conservation", s.conservation_violations));
    }
    let end = s.queued_at_end + s.in_flight_at_end + s.succeeded + s.failed + s.cancelled;
    if end != s.submitted {
        return Err(format!("{name}: final counts {end} != submitted {}", s.submitted));
    }

    // queued column against a replay of every job's history
    for r in run.rows.iter().filter(|r| r.site == "local") {
        let t = r.t as i64 * 1000;
        let queued = run.jobs.iter().filter(|j| state_at(j, t) == Some(&JobState::Queued)).count() as u64;
        let submitted = run.jobs.iter().filter(|j| state_at(j, t).is_some()).count() as u64;
        let placed = run.jobs.iter().filter(|j| state_at(j, t).is_some_and(|s| *s != JobState::Queued)).count() as u64;
        if queued != r.queued || queued + placed != submitted {
            return Err(format!("{name}: at t={} csv queued {} but history says {queued}", r.t, r.queued));
        }
    }

    // counters
    let evictions: u64 = run.accounting.iter().map(|a| a.evictions).sum();
    let from_jobs: u64 = run.jobs.iter().map(|j| j.eviction_count as u64).sum();
    if evictions != s.evicted_total || from_jobs != s.evicted_total {
        return Err(format!(
            "{name}: accounting evictions {evictions}, job records {from_jobs}, counter {}",
            s.evicted_total
        ));
    }

    // time-weighted means: window mean * covered length == sample integral
    let tick_ms = cfg.tick_s as f64 * 1000.0;
    let mut first_sample: BTreeMap<(String, String), i64> = BTreeMap::new();
    let mut integral: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for u in &run.usage {
        let key = (u.group.clone(), u.site.clone());
        first_sample.entry(key).or_insert(u.t.as_millis());
        *integral.entry((u.group.clone(), u.site.clone(), String::new())).or_default() += u.running * tick_ms;
        for (m, g) in &u.gpus {
            *integral.entry((u.group.clone(), u.site.clone(), m.clone())).or_default() += g * tick_ms;
        }
    }
    let mut from_records: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for a in &run.accounting {
        let first = first_sample[&(a.group.clone(), a.site.clone())];
        let covered = (a.window_end.as_millis() - a.window_start.as_millis().max(first)) as f64;
        *from_records.entry((a.group.clone(), a.site.clone(), String::new())).or_default() += a.mean_running_jobs * covered;
        for (m, g) in &a.mean_gpus_allocated {
            *from_records.entry((a.group.clone(), a.site.clone(), m.clone())).or_default() += g * covered;
        }
    }
    for (key, v) in &integral {
        let w = from_records.get(key).copied().unwrap_or(0.0);
        if !close(*v, w) {
            return Err(format!("{name}: {key:?} integral {v} vs windows {w}"));
        }
    }
    Ok(format!("{name}: {} jobs, {} evictions", s.submitted, s.evicted_total))
}

fn eviction_scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::from_toml(SCALING_SCENARIO).unwrap();
    cfg.duration_s = 3600;
    cfg.arrivals.clear();
    cfg.sites.clear();
    cfg.local_capacity = ResourceVector::cores(24).with_memory_gb(96).with_gpu("T4", 2);
    let template = scaling_template();
    for (i, at) in [0u64, 10, 20].iter().enumerate() {
        let mut spec = template.clone();
        spec.workload_id = format!("job-{i}");
        cfg.batch_events.push(offload_core::scenario::SessionEvent { at_s: *at, spec });
    }
    let mut session = cfg.session_events[0].clone();
    session.at_s = 600;
    session.spec.demand = ResourceVector::cores(24).with_memory_gb(64).with_gpu("T4", 2);
    cfg.session_events = vec![session];
    cfg
}

fn scaling_template() -> offload_core::model::WorkloadSpec {
    ScenarioConfig::from_toml(SCALING_SCENARIO).unwrap().arrivals[0].template.clone()
}

/// `gateway account` over the scaling run time series.
fn cli_accounting() -> Result<String, String> {
    let dir = scaling::out_dir();
    let ts = dir.join("timeseries.csv");
    if !ts.exists() {
        let st = Command::new(env!("CARGO_BIN_EXE_gateway"))
            .args(["simulate", "--scenario"])
            .arg(scaling::scenario_path())
            .arg("--out")
            .arg(&dir)
            .args(["--seed", &scaling::SEED.to_string()])
            .env("GATEWAY_LOG_LEVEL", "warn")
            .status()
            .map_err(|e| e.to_string())?;
        if !st.success() {
            return Err("gateway simulate failed".into());
        }
    }
    let out = dir.join("accounting-cli.csv");
    let st = Command::new(env!("CARGO_BIN_EXE_gateway"))
        .args(["account", "--window", "300", "--in"])
        .arg(&ts)
        .arg("--out")
        .arg(&out)
        .env("GATEWAY_LOG_LEVEL", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    if !st.success() {
        return Err("gateway account failed".into());
    }
    let rows: Vec<TickRow> = parse_csv(&std::fs::read_to_string(&ts).unwrap()).unwrap();
    let tick = rows.iter().map(|r| r.t).filter(|t| *t > 0).min().unwrap_or(1) as f64;
    let mut integral: BTreeMap<String, f64> = BTreeMap::new();
    for r in &rows {
        *integral.entry(r.site.clone()).or_default() += r.running as f64 * tick;
    }
    let final_evicted = rows.last().map(|r| r.evicted_total).unwrap_or(0);

    let mut reader = csv::Reader::from_path(&out).map_err(|e| e.to_string())?;
    let mut windows: BTreeMap<String, f64> = BTreeMap::new();
    let mut evictions = 0u64;
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let start = Timestamp::parse_rfc3339(&rec[0]).map_err(|e| e.to_string())?;
        let end = Timestamp::parse_rfc3339(&rec[1]).map_err(|e| e.to_string())?;
        let mean: f64 = rec[4].parse().map_err(|e| format!("{e}"))?;
        *windows.entry(rec[3].to_string()).or_default() += mean * end.millis_since(start) as f64 / 1000.0;
        evictions += rec[6].parse::<u64>().map_err(|e| format!("{e}"))?;
        n += 1;
    }
    for (site, v) in &integral {
        let w = windows.get(site).copied().unwrap_or(0.0);
        if !close(*v, w) {
            return Err(format!("cli accounting {site}: integral {v} vs windows {w}"));
        }
    }
    if evictions != final_evicted {
        return Err(format!("cli accounting evictions {evictions} vs final counter {final_evicted}"));
    }
    Ok(format!("cli accounting: {n} records"))
}

pub fn run(_: &mut CapacityLedger) -> Outcome {
    let mut notes = Vec::new();
    let mut runs: Vec<(String, ScenarioConfig)> = Vec::new();
    for seed in [scaling::SEED, 1, 2] {
        let mut cfg = ScenarioConfig::from_toml(SCALING_SCENARIO).unwrap();
        cfg.seed = seed;
        runs.push((format!("scaling seed {seed}"), cfg));
    }
    runs.push(("three-job eviction".into(), eviction_scenario()));
    for (name, cfg) in &runs {
        let run = run_scenario(cfg).unwrap();
        match check_run(name, cfg, &run) {
            Ok(n) => notes.push(n),
            Err(e) => return Outcome::fail(e),
        }
    }
    match check_run("20% drop", &faults::config(), faults::fault_run()) {
        Ok(n) => notes.push(n),
        Err(e) => return Outcome::fail(e),
    }
    match cli_accounting() {
        Ok(n) => notes.push(n),
        Err(e) => return Outcome::fail(e),
    }
    Outcome::pass(notes.join("; "))
}

fn sim(site: &str, slots: u32, delay: f64, clock: &ManualClock) -> Box<dyn PluginClient> {
    let model = SiteModel::new(site, slots, DelayModel::Fixed { seconds: delay });
    let s = SimulatedSite::new(model, Arc::new(clock.clone())).unwrap();
    Box::new(ProtocolClient::new(Loopback::new(Arc::new(Mutex::new(s)))))
}

/// Full-platform randomized runs against the Server-1 pool, checked after
/// every step, plus whatever the other harnesses recorded.
pub fn capacity(ledger: &mut CapacityLedger) -> Outcome {
    let capacity = server1();
    let mut mismatches = Vec::new();
    for run in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA9 + run);
        let clock = ManualClock::new(Timestamp::EPOCH);
        let group = GroupPolicy {
            group: "g".into(),
            members: ["u".to_string()].into(),
            quota: capacity.clone(),
            allowed_gpu_models: ["T4".to_string(), "RTX5000".to_string()].into(),
            offload_allowed: true,
        };
        let mut store = SecretStore::new();
        store.insert("private-data", b"x".to_vec(), false);
        store.insert("fs-token", b"y".to_vec(), true);
        let gk = Gatekeeper::new(PolicySet::new(vec![group]).unwrap(), store, GatekeeperConfig::default());
        let mut p = Platform::new(
            gk,
            QueueConfig {
                local_capacity: capacity.clone(),
                ..Default::default()
            },
            sim("local", 1_000_000, 0.0, &clock),
        );
        for n in 0..rng.random_range(0..3) {
            let name = format!("vn{n}");
            p.register_node(NodeConfig::new(&name, "sim://"), sim(&name, rng.random_range(1..16), 20.0, &clock), Timestamp::EPOCH)
                .unwrap();
        }
        let mut next = 0;
        for step in 0..300 {
            let now = Timestamp::from_secs(step * 10);
            clock.set(now);
            for _ in 0..rng.random_range(0..3) {
                next += 1;
                let interactive = rng.random_bool(0.1);
                let mut spec = random_spec(&mut rng, format!("j{next}"), interactive);
                spec.expected_duration_s = rng.random_range(30..1200);
                let _ = p.submit(spec, "u", now);
            }
            p.step(now);
            let q = p.queue();
            ledger.record("platform harness", q.local_allocated(), &capacity);
            let recomputed = q
                .jobs()
                .filter(|j| q.is_local(j.id()) && matches!(j.state, JobState::AdmittedLocal | JobState::Running))
                .fold(ResourceVector::zero(), |acc, j| add(&acc, &j.spec.demand));
            if !within(&recomputed, &capacity) && mismatches.len() < 5 {
                mismatches.push(format!("run {run} step {step}: held {recomputed:?}"));
            }
        }
    }
    let detail = format!(
        "{} allocation checks against 64 cores / T4x8 / RTX5000x5, {} violations",
        ledger.checks,
        ledger.violations.len() + mismatches.len()
    );
    match ledger.violations.first().or(mismatches.first()) {
        None => Outcome::pass(detail),
        Some(v) => Outcome::fail(format!("{detail}; first: {v}")),
    }
}

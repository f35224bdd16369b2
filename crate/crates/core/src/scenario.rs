//! Deterministic multi-site scenarios in simulated time.
//!
//! A scenario drives the whole platform (gatekeeper, queue, virtual nodes and
//! simulated sites) on a manual clock. Scenario time zero is the Unix epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatekeeper::{Gatekeeper, GatekeeperConfig, GroupPolicy, PolicySet, SecretStore};
use crate::metrics::{aggregate_accounting, AccountingRecord, UsageSample};
use crate::model::{JobRecord, JobState, WorkloadSpec, LOCAL_SITE};
use crate::platform::Platform;
use crate::plugin::client::{Loopback, Lossy, PluginClient, ProtocolClient};
use crate::plugin::sim::{DelayModel, SimulatedSite, SiteModel};
use crate::queue::{AuditRecord, QueueConfig, RoutingPolicy};
use crate::resources::ResourceVector;
use crate::time::{ManualClock, Timestamp};
use crate::vnode::NodeConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalPhase {
    pub start_s: u64,
    pub end_s: u64,
    /// Mean Poisson arrival rate, jobs per minute.
    pub rate_per_min: f64,
    /// Each arrival copies this spec; `workload_id` serves as the id prefix.
    pub template: WorkloadSpec,
    /// Probability that an arrival is flagged offload-compatible.
    pub offload_fraction: f64,
    /// Durations are scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    #[serde(default)]
    pub duration_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEvent {
    pub at_s: u64,
    pub spec: WorkloadSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSecret {
    pub name: String,
    pub payload: String,
    #[serde(default)]
    pub shareable: bool,
}

fn d10() -> u64 {
    10
}
fn d30() -> u64 {
    30
}
fn d5() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeParams {
    #[serde(default = "d10")]
    pub heartbeat_interval_s: u64,
    #[serde(default = "d30")]
    pub ttl_s: u64,
    #[serde(default = "d10")]
    pub poll_interval_s: u64,
    #[serde(default = "d5")]
    pub max_retries: u32,
}

impl Default for NodeParams {
    fn default() -> Self {
        NodeParams {
            heartbeat_interval_s: d10(),
            ttl_s: d30(),
            poll_interval_s: d10(),
            max_retries: d5(),
        }
    }
}

fn default_local() -> ResourceVector {
    crate::fixtures::server1()
}
fn default_window() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration_s: u64,
    pub tick_s: u64,
    pub seed: u64,
    #[serde(default = "default_local")]
    pub local_capacity: ResourceVector,
    #[serde(default)]
    pub routing: RoutingPolicy,
    #[serde(default)]
    pub node: NodeParams,
    /// Fraction of plugin calls lost in transit, for fault-injection runs.
    #[serde(default)]
    pub transport_drop_rate: f64,
    #[serde(default = "default_window")]
    pub accounting_window_s: u64,
    #[serde(default)]
    pub platform_secrets: Vec<PlatformSecret>,
    pub groups: Vec<GroupPolicy>,
    pub sites: Vec<SiteModel>,
    pub arrivals: Vec<ArrivalPhase>,
    #[serde(default)]
    pub session_events: Vec<SessionEvent>,
    /// Batch submissions at fixed times, on top of the Poisson arrivals.
    #[serde(default)]
    pub batch_events: Vec<SessionEvent>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::ConfigInvalid(m));
        if self.duration_s == 0 || self.tick_s == 0 {
            return bad("duration_s and tick_s must be positive".into());
        }
        if self.duration_s % self.tick_s != 0 {
            return bad(format!("tick_s {} does not divide duration_s {}", self.tick_s, self.duration_s));
        }
        if !(0.0..1.0).contains(&self.transport_drop_rate) {
            return bad("transport_drop_rate must be in [0, 1)".into());
        }
        if self.accounting_window_s == 0 {
            return bad("accounting_window_s must be positive".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.sites {
            s.validate().map_err(|e| ScenarioError::ConfigInvalid(e.to_string()))?;
            if s.site == LOCAL_SITE || !names.insert(s.site.as_str()) {
                return bad(format!("site name {:?} is reserved or repeated", s.site));
            }
        }
        let mut expected_start = 0;
        for (i, p) in self.arrivals.iter().enumerate() {
            if p.start_s != expected_start {
                return bad(format!("arrival phase {i} starts at {} instead of {expected_start}", p.start_s));
            }
            if p.end_s <= p.start_s {
                return bad(format!("arrival phase {i} is empty"));
            }
            if !(p.rate_per_min >= 0.0 && p.rate_per_min.is_finite()) {
                return bad(format!("arrival phase {i} has an invalid rate"));
            }
            if !(0.0..=1.0).contains(&p.offload_fraction) || !(0.0..1.0).contains(&p.duration_jitter) {
                return bad(format!("arrival phase {i}: offload_fraction in [0,1], duration_jitter in [0,1)"));
            }
            if p.template.is_interactive() {
                return bad(format!("arrival phase {i} template must be a batch job"));
            }
            expected_start = p.end_s;
        }
        if expected_start > self.duration_s {
            return bad("arrival phases run past duration_s".into());
        }
        for e in &self.session_events {
            if !e.spec.is_interactive() || e.at_s >= self.duration_s {
                return bad(format!("session event {} must be interactive and inside the run", e.spec.workload_id));
            }
        }
        for e in &self.batch_events {
            if e.spec.is_interactive() || e.at_s >= self.duration_s {
                return bad(format!("batch event {} must be a batch job inside the run", e.spec.workload_id));
            }
        }
        PolicySet::new(self.groups.clone()).map_err(|e| ScenarioError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

/// One CSV row: running jobs at a site, plus global queue counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRow {
    pub t: u64,
    pub site: String,
    pub running: u64,
    pub queued: u64,
    pub evicted_total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub peak_running: u64,
    pub mean_running: f64,
    pub succeeded: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ticks: u64,
    pub submitted: u64,
    pub rejected: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub cancelled: u64,
    pub queued_at_end: u64,
    pub in_flight_at_end: u64,
    pub evicted_total: u64,
    pub conservation_violations: u64,
    pub sites: BTreeMap<String, SiteSummary>,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub rows: Vec<TickRow>,
    pub csv: String,
    pub summary: Summary,
    pub decisions: Vec<AuditRecord>,
    pub usage: Vec<UsageSample>,
    pub accounting: Vec<AccountingRecord>,
    pub jobs: Vec<JobRecord>,
    /// Site name to the scenario time it was registered.
    pub joined_at: BTreeMap<String, u64>,
}

struct Arrival {
    at_ms: i64,
    spec: WorkloadSpec,
}

fn mix_seed(scenario: u64, site: u64, index: usize) -> u64 {
    scenario ^ site.rotate_left(32) ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Draws the batch arrival stream. Depends only on the config and seed.
fn generate_arrivals(config: &ScenarioConfig) -> Vec<Arrival> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    let mut n = 0u64;
    for phase in &config.arrivals {
        if phase.rate_per_min <= 0.0 {
            continue;
        }
        let exp = Exp::new(phase.rate_per_min / 60.0).expect("positive rate");
        let mut t = phase.start_s as f64;
        loop {
            t += exp.sample(&mut rng);
            if t >= phase.end_s as f64 {
                break;
            }
            let offload = rng.random::<f64>() < phase.offload_fraction;
            let factor = 1.0 + phase.duration_jitter * (2.0 * rng.random::<f64>() - 1.0);
            n += 1;
            let mut spec = phase.template.clone();
            spec.workload_id = format!("{}-{n:05}", phase.template.workload_id);
            spec.expected_duration_s = ((spec.expected_duration_s as f64 * factor).round() as u64).max(1);
            spec.offload_compatible = offload;
            if offload {
                spec.uses_local_storage = false;
            }
            out.push(Arrival {
                at_ms: crate::time::secs_to_millis(t),
                spec,
            });
        }
    }
    out
}

fn local_runtime(clock: &ManualClock) -> Box<dyn PluginClient> {
    let model = SiteModel::new(LOCAL_SITE, 1_000_000, DelayModel::Fixed { seconds: 0.0 });
    let site = SimulatedSite::new(model, Arc::new(clock.clone())).expect("static model is valid");
    Box::new(ProtocolClient::new(Loopback::new(Arc::new(Mutex::new(site)))))
}

fn build_platform(config: &ScenarioConfig, clock: &ManualClock) -> Platform {
    let mut store = SecretStore::new();
    for s in &config.platform_secrets {
        store.insert(s.name.clone(), s.payload.as_bytes().to_vec(), s.shareable);
    }
    let gk_config = GatekeeperConfig {
        platform_secrets: config.platform_secrets.iter().map(|s| s.name.clone()).collect(),
        ..Default::default()
    };
    let policies = PolicySet::new(config.groups.clone()).expect("validated");
    let gatekeeper = Gatekeeper::new(policies, store, gk_config);
    let queue = QueueConfig {
        local_capacity: config.local_capacity.clone(),
        routing: config.routing.clone(),
    };
    Platform::new(gatekeeper, queue, local_runtime(clock))
}

fn site_client(config: &ScenarioConfig, index: usize, clock: &ManualClock) -> Box<dyn PluginClient> {
    let mut model = config.sites[index].clone();
    model.seed = mix_seed(config.seed, model.seed, index);
    let site = SimulatedSite::new(model, Arc::new(clock.clone())).expect("validated");
    let transport = Loopback::new(Arc::new(Mutex::new(site)));
    if config.transport_drop_rate > 0.0 {
        let seed = mix_seed(config.seed, 0xFA17, index);
        Box::new(ProtocolClient::new(Lossy::new(transport, config.transport_drop_rate, seed)))
    } else {
        Box::new(ProtocolClient::new(transport))
    }
}

/// Runs the scenario to completion.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun, ScenarioError> {
    config.validate()?;
    let clock = ManualClock::new(Timestamp::EPOCH);
    let mut platform = build_platform(config, &clock);
    let arrivals = generate_arrivals(config);
    let mut sessions: Vec<&SessionEvent> = config.session_events.iter().collect();
    sessions.sort_by_key(|e| e.at_s);
    let mut fixed: Vec<&SessionEvent> = config.batch_events.iter().collect();
    fixed.sort_by_key(|e| e.at_s);
    let mut next_fixed = 0;

    let join: Vec<u64> = config
        .sites
        .iter()
        .map(|s| s.join_time().map_or(0, |t| (t.as_millis() / 1000) as u64))
        .collect();
    let mut joined_at = BTreeMap::new();
    let mut site_order = vec![LOCAL_SITE.to_string()];
    site_order.extend(config.sites.iter().map(|s| s.site.clone()));

    let mut rows = Vec::new();
    let mut usage = Vec::new();
    let mut rejected = 0u64;
    let mut violations = 0u64;
    let mut next_arrival = 0;
    let mut next_session = 0;
    let ticks = config.duration_s / config.tick_s;
    let groups: Vec<String> = config.groups.iter().map(|g| g.group.clone()).collect();

    for k in 0..ticks {
        let t_s = k * config.tick_s;
        let now = Timestamp::from_secs(t_s as i64);
        clock.set(now);

        for (i, site) in config.sites.iter().enumerate() {
            if join[i] <= t_s && !joined_at.contains_key(&site.site) {
                let node = NodeConfig {
                    node_id: site.site.clone(),
                    plugin_endpoint: format!("sim://{}", site.site),
                    heartbeat_interval_s: config.node.heartbeat_interval_s,
                    ttl_s: config.node.ttl_s,
                    poll_interval_s: config.node.poll_interval_s,
                    max_retries: config.node.max_retries,
                };
                platform
                    .register_node(node, site_client(config, i, &clock), now)
                    .expect("site names are unique");
                joined_at.insert(site.site.clone(), t_s);
            }
        }
        while next_session < sessions.len() && sessions[next_session].at_s <= t_s {
            let spec = sessions[next_session].spec.clone();
            let owner = spec.owner.clone();
            if platform.submit(spec, &owner, now).is_err() {
                rejected += 1;
            }
            next_session += 1;
        }
        while next_fixed < fixed.len() && fixed[next_fixed].at_s <= t_s {
            let spec = fixed[next_fixed].spec.clone();
            let owner = spec.owner.clone();
            if platform.submit(spec, &owner, now).is_err() {
                rejected += 1;
            }
            next_fixed += 1;
        }
        while next_arrival < arrivals.len() && arrivals[next_arrival].at_ms <= now.as_millis() {
            let spec = arrivals[next_arrival].spec.clone();
            let owner = spec.owner.clone();
            if platform.submit(spec, &owner, now).is_err() {
                rejected += 1;
            }
            next_arrival += 1;
        }

        platform.step(now);

        let counts = platform.counts();
        if platform.submitted() != counts.queued + counts.in_flight() + counts.terminal() + counts.evicted {
            violations += 1;
        }
        let snap = platform.queue().snapshot();
        for site in &site_order {
            rows.push(TickRow {
                t: t_s,
                site: site.clone(),
                running: snap.running_by_site.get(site).copied().unwrap_or(0),
                queued: counts.queued,
                evicted_total: snap.evicted_total,
            });
        }
        usage.extend(usage_samples(&platform, &groups, &site_order, now));
    }

    let csv = rows_to_csv(&rows);
    let accounting =
        aggregate_accounting(&usage, config.accounting_window_s).expect("samples are generated in time order");
    let jobs: Vec<JobRecord> = platform.queue().jobs().cloned().collect();
    let summary = summarize(&platform, &rows, &jobs, &site_order, ticks, rejected, violations);
    Ok(ScenarioRun {
        rows,
        csv,
        summary,
        decisions: platform.queue().audit().to_vec(),
        usage,
        accounting,
        jobs,
        joined_at,
    })
}

/// Per (group, site) usage at one instant. Evictions only happen in the local
/// pool, so they are attributed to the local site.
fn usage_samples(platform: &Platform, groups: &[String], sites: &[String], now: Timestamp) -> Vec<UsageSample> {
    let mut running: BTreeMap<(&str, &str), (f64, BTreeMap<String, f64>)> = BTreeMap::new();
    let mut evictions: BTreeMap<&str, u64> = BTreeMap::new();
    for j in platform.queue().jobs() {
        *evictions.entry(j.spec.group.as_str()).or_insert(0) += j.eviction_count as u64;
        if j.state == JobState::Running {
            if let Some(site) = &j.assigned_site {
                let e = running.entry((j.spec.group.as_str(), site.as_str())).or_default();
                e.0 += 1.0;
                for (m, n) in &j.spec.demand.gpus {
                    *e.1.entry(m.clone()).or_insert(0.0) += *n as f64;
                }
            }
        }
    }
    let mut out = Vec::new();
    for g in groups {
        for s in sites {
            let (r, gpus) = running.remove(&(g.as_str(), s.as_str())).unwrap_or_default();
            out.push(UsageSample {
                t: now,
                group: g.clone(),
                site: s.clone(),
                running: r,
                gpus,
                evicted_total: if s == LOCAL_SITE {
                    evictions.get(g.as_str()).copied().unwrap_or(0)
                } else {
                    0
                },
            });
        }
    }
    out
}

fn summarize(
    platform: &Platform,
    rows: &[TickRow],
    jobs: &[JobRecord],
    sites: &[String],
    ticks: u64,
    rejected: u64,
    violations: u64,
) -> Summary {
    let counts = platform.counts();
    let mut per_site: BTreeMap<String, SiteSummary> =
        sites.iter().map(|s| (s.clone(), SiteSummary::default())).collect();
    for r in rows {
        let s = per_site.get_mut(&r.site).expect("rows only name known sites");
        s.peak_running = s.peak_running.max(r.running);
        s.mean_running += r.running as f64;
    }
    for s in per_site.values_mut() {
        s.mean_running /= ticks.max(1) as f64;
    }
    for j in jobs {
        if let Some(s) = j.assigned_site.as_ref().and_then(|site| per_site.get_mut(site)) {
            match j.state {
                JobState::Succeeded => s.succeeded += 1,
                JobState::Failed => s.failed += 1,
                _ => {}
            }
        }
    }
    Summary {
        ticks,
        submitted: platform.submitted(),
        rejected,
        succeeded: counts.succeeded,
        failed: counts.failed,
        cancelled: counts.cancelled,
        queued_at_end: counts.queued,
        in_flight_at_end: counts.in_flight(),
        evicted_total: platform.queue().evicted_total(),
        conservation_violations: violations,
        sites: per_site,
    }
}

pub const CSV_HEADER: &str = "t,site,running,queued,evicted_total";

pub fn rows_to_csv(rows: &[TickRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory csv write");
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed csv at line {line}: {reason}")]
pub struct MalformedCsv {
    pub line: u64,
    pub reason: String,
}

pub fn parse_csv(text: &str) -> Result<Vec<TickRow>, MalformedCsv> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MalformedCsv { line: 1, reason: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(MalformedCsv {
            line: 1,
            reason: format!("expected header {CSV_HEADER}"),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize::<TickRow>() {
        rows.push(rec.map_err(|e| MalformedCsv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedSite {
    pub site: String,
    pub running: Vec<u64>,
    /// Sum of this site and every site listed before it.
    pub stacked: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedSeries {
    pub t: Vec<u64>,
    pub sites: Vec<StackedSite>,
}

/// Cumulative per-site series for a stacked plot, in CSV site order.
pub fn emit_plot_data(csv_text: &str) -> Result<StackedSeries, MalformedCsv> {
    let rows = parse_csv(csv_text)?;
    let mut times: Vec<u64> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<(u64, String), u64> = BTreeMap::new();
    for r in rows {
        if times.last() != Some(&r.t) {
            if times.last().is_some_and(|last| r.t < *last) {
                return Err(MalformedCsv {
                    line: 0,
                    reason: format!("time {} goes backwards", r.t),
                });
            }
            times.push(r.t);
        }
        if !order.contains(&r.site) {
            order.push(r.site.clone());
        }
        values.insert((r.t, r.site), r.running);
    }
    let mut below = vec![0u64; times.len()];
    let mut sites = Vec::new();
    for site in order {
        let running: Vec<u64> = times
            .iter()
            .map(|t| values.get(&(*t, site.clone())).copied().unwrap_or(0))
            .collect();
        for (b, r) in below.iter_mut().zip(&running) {
            *b += r;
        }
        sites.push(StackedSite {
            site,
            running,
            stacked: below.clone(),
        });
    }
    Ok(StackedSeries { t: times, sites })
}

/// Turns a time-series CSV into accounting samples under group "all".
pub fn usage_from_csv(csv_text: &str) -> Result<Vec<UsageSample>, MalformedCsv> {
    Ok(parse_csv(csv_text)?
        .into_iter()
        .map(|r| UsageSample {
            t: Timestamp::from_secs(r.t as i64),
            group: "all".into(),
            evicted_total: if r.site == LOCAL_SITE { r.evicted_total } else { 0 },
            site: r.site,
            running: r.running as f64,
            gpus: BTreeMap::new(),
        })
        .collect())
}

/// The scenario bundled with the crate.
pub const SCALING_SCENARIO: &str = include_str!("../scenarios/scaling.scenario");

//! Golden plugin exchanges replayed against the local executor and the
//! simulated backend, in process and over HTTP, plus randomized duplicate
//! create/delete interleavings.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use offload_core::plugin::client::Transport;
use offload_core::plugin::http::{self, HttpRequest, HttpResponse};
use offload_core::plugin::local::LocalExecutor;
use offload_core::plugin::sim::{DelayModel, SimulatedSite, SiteModel};
use offload_core::plugin::{CreateResponse, DeleteResponse, PingResponse, Plugin, PluginJobRequest, StatusDoc};
use offload_core::{ManualClock, ResourceVector, Timestamp};
use offload_gateway::server::{plugin_router, serve_on};
use offload_gateway::transport::HttpTransport;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::common::{CapacityLedger, Outcome};

/// 2025-02-01T00:00:00Z; the fixtures' timestamps assume this frozen clock.
const FIXTURE_TIME_MS: i64 = 1_738_368_000_000;

#[derive(Deserialize)]
#[serde(untagged)]
enum Step {
    Settle { settle: bool },
    Exchange(Exchange),
}

#[derive(Deserialize)]
struct Exchange {
    name: String,
    method: String,
    path: String,
    query: String,
    body: Option<String>,
    status: u16,
    content_type: String,
    response: Option<String>,
    response_by_backend: Option<std::collections::BTreeMap<String, String>>,
}

fn fixtures() -> Vec<Step> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/plugin_protocol.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

struct InProcess(Arc<Mutex<Box<dyn Plugin>>>);

impl Transport for InProcess {
    fn send(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, String> {
        let mut p = self.0.lock().unwrap();
        Ok(http::handle(&mut **p, HttpRequest { method, path, query, body }))
    }
}

fn backend(kind: &str, scratch: &Path) -> Box<dyn Plugin> {
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(FIXTURE_TIME_MS)));
    match kind {
        "local" => Box::new(
            LocalExecutor::new("fixture", 1, scratch, clock)
                .unwrap()
                .with_slot_size(ResourceVector::cores(8).with_memory_gb(32)),
        ),
        _ => Box::new(SimulatedSite::new(SiteModel::new("fixture", 1, DelayModel::Fixed { seconds: 0.0 }), clock).unwrap()),
    }
}

fn spawn_http(plugin: Arc<Mutex<Box<dyn Plugin>>>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve_on(listener, plugin_router(plugin)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// Polls until no created job is pending or running.
fn settle(t: &mut dyn Transport, ids: &BTreeSet<String>) -> Result<(), String> {
    let deadline = Instant::now() + Duration::from_secs(10);
    for id in ids {
        loop {
            let r = t.send("GET", "/status", &format!("job_id={id}"), b"")?;
            let doc: StatusDoc = serde_json::from_slice(&r.body).map_err(|e| e.to_string())?;
            if !matches!(doc.state.as_str(), "pending" | "running") {
                break;
            }
            if Instant::now() > deadline {
                return Err(format!("{id} did not finish"));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
    Ok(())
}

/// Typed re-serialization of a JSON response must reproduce it byte for byte.
fn round_trips(path: &str, status: u16, body: &[u8]) -> bool {
    fn again<T: serde::de::DeserializeOwned + serde::Serialize>(body: &[u8]) -> bool {
        serde_json::from_slice::<T>(body).is_ok_and(|v| serde_json::to_vec(&v).unwrap() == body)
    }
    match (path, status) {
        ("/create", 201) => again::<CreateResponse>(body),
        ("/status", 200) => again::<StatusDoc>(body),
        ("/delete", 200) => again::<DeleteResponse>(body),
        ("/ping", 200) => again::<PingResponse>(body),
        _ => true,
    }
}

fn replay(kind: &str, t: &mut dyn Transport, steps: &[Step]) -> Result<usize, String> {
    let mut created = BTreeSet::new();
    let mut n = 0;
    for step in steps {
        let ex = match step {
            Step::Settle { settle: true } => {
                settle(t, &created)?;
                continue;
            }
            Step::Settle { settle: false } => continue,
            Step::Exchange(ex) => ex,
        };
        let body = ex.body.as_deref().unwrap_or("").as_bytes();
        if ex.path == "/create" {
            if let Ok(req) = serde_json::from_slice::<PluginJobRequest>(body) {
                // accepted request fixtures are canonical too
                if ex.status == 201 && serde_json::to_vec(&req).unwrap() != body {
                    return Err(format!("{}: request body is not canonical", ex.name));
                }
                if ex.status == 201 {
                    created.insert(req.job_id);
                }
            }
        }
        let r = t.send(&ex.method, &ex.path, &ex.query, body)?;
        let expected = match (&ex.response, &ex.response_by_backend) {
            (Some(r), _) => r.clone(),
            (None, Some(m)) => m[kind].clone(),
            _ => return Err(format!("{}: fixture has no response", ex.name)),
        };
        if r.status != ex.status || r.content_type != ex.content_type || r.body != expected.as_bytes() {
            return Err(format!(
                "{}: got {} {} {:?}, want {} {} {:?}",
                ex.name,
                r.status,
                r.content_type,
                r.body_str(),
                ex.status,
                ex.content_type,
                expected
            ));
        }
        if !round_trips(&ex.path, r.status, &r.body) {
            return Err(format!("{}: response does not survive a typed round trip", ex.name));
        }
        n += 1;
    }
    Ok(n)
}

fn golden() -> Result<String, String> {
    let steps = fixtures();
    let mut runs = Vec::new();
    for kind in ["local", "sim"] {
        for wire in ["in-process", "http"] {
            let scratch = tempfile::tempdir().unwrap();
            let plugin = Arc::new(Mutex::new(backend(kind, scratch.path())));
            let mut transport: Box<dyn Transport> = match wire {
                "http" => Box::new(HttpTransport::new(spawn_http(plugin), Duration::from_secs(5))),
                _ => Box::new(InProcess(plugin)),
            };
            let n = replay(kind, transport.as_mut(), &steps).map_err(|e| format!("{kind}/{wire}: {e}"))?;
            runs.push(format!("{kind}/{wire} {n}"));
        }
    }
    Ok(runs.join(", "))
}

fn job_request(id: &str) -> Vec<u8> {
    let req = PluginJobRequest {
        job_id: id.to_string(),
        image: "busybox".into(),
        command: vec!["true".into()],
        env: Default::default(),
        resources: ResourceVector::cores(1),
        secret_bundle: Default::default(),
        timeout_s: 60,
    };
    serde_json::to_vec(&req).unwrap()
}

/// Number of distinct jobs a backend holds, read from the backend itself.
fn table_size(kind: &str, plugin: &mut dyn Plugin, scratch: &Path, ids: &[String]) -> usize {
    match kind {
        "local" => std::fs::read_dir(scratch).unwrap().count(),
        _ => ids.iter().filter(|id| plugin.status(id).state.as_str() != "unknown").count(),
    }
}

fn idempotency(rounds: u64) -> Result<String, String> {
    let mut ops_total = 0;
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1D3 + round);
        let kind = if round % 2 == 0 { "local" } else { "sim" };
        let scratch = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(FIXTURE_TIME_MS)));
        let mut plugin: Box<dyn Plugin> = match kind {
            // no slots: nothing is spawned, the table is all that matters
            "local" => Box::new(LocalExecutor::new("site", 0, scratch.path(), clock).unwrap()),
            _ => Box::new(SimulatedSite::new(SiteModel::new("site", 2, DelayModel::Fixed { seconds: 5.0 }), clock).unwrap()),
        };
        let ids: Vec<String> = (0..rng.random_range(1..6)).map(|i| format!("job-{i}")).collect();
        let mut ops: Vec<(bool, String)> = Vec::new();
        for id in &ids {
            for _ in 0..rng.random_range(1..=4) {
                ops.push((true, id.clone()));
            }
            for _ in 0..rng.random_range(0..=3) {
                ops.push((false, id.clone()));
            }
        }
        ops.shuffle(&mut rng);
        let mut created = BTreeSet::new();
        let mut last_delete: std::collections::BTreeMap<String, Vec<u8>> = Default::default();
        for (is_create, id) in &ops {
            ops_total += 1;
            let (path, body) = if *is_create {
                ("/create", job_request(id))
            } else {
                ("/delete", serde_json::to_vec(&serde_json::json!({ "job_id": id })).unwrap())
            };
            let r = http::handle(plugin.as_mut(), HttpRequest { method: "POST", path, query: "", body: &body });
            if *is_create {
                let want = format!("{{\"backend_ref\":\"site/{id}\"}}");
                if r.status != 201 || r.body != want.as_bytes() {
                    return Err(format!("round {round}: create {id} answered {} {}", r.status, r.body_str()));
                }
                created.insert(id.clone());
            } else {
                let want: &[u8] = if created.contains(id) { b"{\"deleted\":true}" } else { b"{\"deleted\":false}" };
                if r.body != want {
                    return Err(format!("round {round}: delete {id} answered {}", r.body_str()));
                }
                if let Some(prev) = last_delete.get(id) {
                    if created.contains(id) && *prev != r.body && prev.as_slice() == want {
                        return Err(format!("round {round}: repeated delete of {id} changed its answer"));
                    }
                }
                last_delete.insert(id.clone(), r.body.clone());
            }
            let size = table_size(kind, plugin.as_mut(), scratch.path(), &ids);
            if size != created.len() {
                return Err(format!("round {round} ({kind}): {size} backend jobs for {} ids", created.len()));
            }
        }
    }
    Ok(format!("{rounds} randomized interleavings, {ops_total} calls"))
}

pub fn run(_: &mut CapacityLedger) -> Outcome {
    match (golden(), idempotency(200)) {
        (Ok(g), Ok(i)) => Outcome::pass(format!("golden exchanges ({g}); {i}")),
        (Err(e), _) | (_, Err(e)) => Outcome::fail(e),
    }
}

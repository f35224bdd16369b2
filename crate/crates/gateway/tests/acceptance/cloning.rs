//! Clones of random sessions, compared field by field with the session.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use offload_core::gatekeeper::{Gatekeeper, GatekeeperConfig, GroupPolicy, PolicySet, SecretStore};
use offload_core::model::{PlacementHint, SecretRef, WorkloadSpec};
use offload_core::platform::Platform;
use offload_core::plugin::client::{Loopback, ProtocolClient};
use offload_core::plugin::sim::{DelayModel, SimulatedSite, SiteModel};
use offload_core::queue::QueueConfig;
use offload_core::{ManualClock, ResourceVector, Timestamp};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::common::{CapacityLedger, Outcome};

const TEMPLATES: usize = 500;
const SECRETS: [(&str, bool); 4] = [("fs-token", true), ("s3-key", true), ("patient-data", false), ("wandb", false)];
const USERS: [&str; 3] = ["ada", "bo", "cy"];

fn platform() -> Platform {
    let group = GroupPolicy {
        group: "ml".into(),
        members: USERS.iter().map(|u| u.to_string()).collect(),
        quota: ResourceVector::cores(64).with_memory_gb(512).with_gpu("T4", 8).with_gpu("RTX5000", 5),
        allowed_gpu_models: ["T4".to_string(), "RTX5000".to_string()].into(),
        offload_allowed: true,
    };
    let mut store = SecretStore::new();
    for (name, shareable) in SECRETS {
        store.insert(name, format!("{name}-payload").into_bytes(), shareable);
    }
    let config = GatekeeperConfig {
        platform_secrets: vec!["fs-token".into()],
        ..Default::default()
    };
    let gk = Gatekeeper::new(PolicySet::new(vec![group]).unwrap(), store, config);
    let clock = ManualClock::new(Timestamp::EPOCH);
    let site = SimulatedSite::new(SiteModel::new("local", 1_000_000, DelayModel::Fixed { seconds: 0.0 }), Arc::new(clock)).unwrap();
    let mut q = QueueConfig::default();
    q.local_capacity = ResourceVector::zero();
    Platform::new(gk, q, Box::new(ProtocolClient::new(Loopback::new(Arc::new(Mutex::new(site))))))
}

fn word<R: Rng>(rng: &mut R) -> String {
    let len = rng.random_range(1..10);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn random_session<R: Rng>(rng: &mut R, i: usize) -> WorkloadSpec {
    let owner = *USERS.choose(rng).unwrap();
    let mut s = WorkloadSpec::session(format!("nb-{i}"), owner, "ml");
    s.image = format!("harbor.local/{}/{}:{}", word(rng), word(rng), rng.random_range(0..20));
    s.command = (0..rng.random_range(1..4)).map(|_| word(rng)).collect();
    for _ in 0..rng.random_range(0..5) {
        s.env.insert(word(rng).to_uppercase(), word(rng));
    }
    s.demand = ResourceVector::cores(rng.random_range(1..=16))
        .with_cpu_millicores(rng.random_range(500..=16_000))
        .with_memory_bytes(rng.random_range(1..=64) * 1_000_000_000)
        .with_gpu("T4", rng.random_range(0..=2))
        .with_gpu("RTX5000", rng.random_range(0..=1));
    for (name, _) in SECRETS.iter() {
        if !rng.random_bool(0.4) {
            continue;
        }
        // the gatekeeper decides shareability; the flag sent here is noise
        s.secret_refs.push(SecretRef::new(*name, rng.random_bool(0.5)));
        if rng.random_bool(0.5) {
            s.env.insert(format!("{}_PATH", name.to_uppercase().replace('-', "_")), format!("secret://{name}"));
        }
    }
    s.expected_duration_s = rng.random_range(60..86_400);
    s.uses_local_storage = rng.random_bool(0.7);
    if rng.random_bool(0.3) {
        s.placement = PlacementHint::PreferRemote;
    }
    s
}

fn differing_fields(a: &Value, b: &Value) -> BTreeSet<String> {
    let (Value::Object(a), Value::Object(b)) = (a, b) else {
        return ["<root>".to_string()].into();
    };
    a.keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

pub fn run(_: &mut CapacityLedger) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0_5817);
    let allowed: BTreeSet<String> = ["workload_id", "kind", "command"].iter().map(|s| s.to_string()).collect();
    let mut p = platform();
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut i = 0;
    while checked < TEMPLATES && i < TEMPLATES * 4 {
        i += 1;
        let spec = random_session(&mut rng, i);
        let owner = spec.owner.clone();
        let Ok(session) = p.submit(spec, &owner, Timestamp::EPOCH) else {
            continue;
        };
        let command: Vec<String> = vec!["python".into(), format!("{}.py", word(&mut rng)), word(&mut rng)];
        let clone = match p.clone_session(session.id(), command.clone(), false, Timestamp::EPOCH) {
            Ok(c) => c,
            Err(e) => {
                failures.push(format!("{}: clone rejected: {e}", session.id()));
                continue;
            }
        };
        checked += 1;
        let a = serde_json::to_value(&session.spec).unwrap();
        let b = serde_json::to_value(&clone.spec).unwrap();
        let diff = differing_fields(&a, &b);
        if !diff.is_subset(&allowed) {
            failures.push(format!("{}: unexpected differences {:?}", session.id(), diff.difference(&allowed).collect::<Vec<_>>()));
        }
        if clone.spec.command != command || clone.spec.is_interactive() || clone.spec.workload_id == session.spec.workload_id {
            failures.push(format!("{}: clone did not take the new command, batch kind and a fresh id", session.id()));
        }
    }
    let detail = format!("{checked} templates cloned, {} mismatches", failures.len());
    match failures.first() {
        None if checked == TEMPLATES => Outcome::pass(detail),
        None => Outcome::fail(format!("{detail}; too many templates rejected")),
        Some(f) => Outcome::fail(format!("{detail}; first: {f}")),
    }
}

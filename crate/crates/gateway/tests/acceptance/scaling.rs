//! `gateway simulate` on the bundled scenario, checked for the qualitative
//! shape of the multi-site test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use offload_core::scenario::{parse_csv, ScenarioConfig, TickRow};

use super::common::{CapacityLedger, Outcome};

pub const SEED: u64 = 7;
/// Ticks before this fraction of the run are warm-up for the stability check.
const WARM_UP: f64 = 0.10;

pub fn scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/scaling.scenario")
}

pub fn out_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("scaling-seed7")
}

fn series(rows: &[TickRow]) -> BTreeMap<&str, Vec<(u64, u64)>> {
    let mut out: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
    for r in rows {
        out.entry(r.site.as_str()).or_default().push((r.t, r.running));
    }
    out
}

fn cv(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if mean == 0.0 {
        f64::NAN
    } else {
        var.sqrt() / mean
    }
}

pub fn run(_: &mut CapacityLedger) -> Outcome {
    let out = out_dir();
    let _ = std::fs::remove_dir_all(&out);
    let started = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_gateway"))
        .args(["simulate", "--scenario"])
        .arg(scenario_path())
        .arg("--out")
        .arg(&out)
        .args(["--seed", &SEED.to_string()])
        .env("GATEWAY_LOG_LEVEL", "warn")
        .output()
        .expect("running the gateway binary");
    let wall = started.elapsed().as_secs_f64();
    if !status.status.success() {
        return Outcome::fail(format!("gateway simulate failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let cfg = ScenarioConfig::load(&scenario_path()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let csv = std::fs::read_to_string(out.join("timeseries.csv")).unwrap();
    let rows = parse_csv(&csv).unwrap();
    let by_site = series(&rows);
    let duration = cfg.duration_s as f64;
    let tick = cfg.tick_s;
    let mut checks: Vec<(String, bool)> = Vec::new();

    let submitted = summary["submitted"].as_u64().unwrap_or(0);
    checks.push((format!("{submitted} jobs"), (400..=600).contains(&submitted)));
    checks.push((format!("wall {wall:.1}s"), wall < 60.0));

    // (a) steady sites
    for site in ["infncnaf", "podman"] {
        let after: Vec<&(u64, u64)> = by_site[site].iter().filter(|(t, _)| *t as f64 >= WARM_UP * duration).collect();
        let frac = after.iter().filter(|(_, r)| *r > 0).count() as f64 / after.len() as f64;
        checks.push((format!("(a) {site} busy {:.1}%", frac * 100.0), frac >= 0.95));
    }

    // (b) early variability
    let first_third = |site: &str| -> Vec<f64> {
        by_site[site].iter().filter(|(t, _)| (*t as f64) < duration / 3.0).map(|(_, r)| *r as f64).collect()
    };
    let (cv_leo, cv_naf) = (cv(&first_third("leonardo")), cv(&first_third("infncnaf")));
    checks.push((format!("(b) cv leonardo {cv_leo:.3} vs infncnaf {cv_naf:.3}"), cv_leo >= 2.0 * cv_naf));

    // (c) late joiner
    let join = cfg
        .sites
        .iter()
        .find(|s| s.site == "terabitpadova")
        .and_then(|s| s.join_time())
        .map(|t| (t.as_millis() / 1000) as u64)
        .unwrap();
    let tera = &by_site["terabitpadova"];
    let before_zero = tera.iter().filter(|(t, _)| *t < join).all(|(_, r)| *r == 0);
    let first_active = tera.iter().find(|(t, r)| *t >= join && *r > 0).map(|(t, _)| (t - join) / tick);
    checks.push((
        format!("(c) terabitpadova idle before {join}s, running after {first_active:?} ticks"),
        before_zero && first_active.is_some_and(|k| k <= 10),
    ));

    // (d) registered but idle
    let recas_peak = by_site["recas"].iter().map(|(_, r)| *r).max().unwrap_or(0);
    checks.push((format!("(d) recas peak {recas_peak}"), recas_peak == 0));

    // (e) growth
    let quarter = |lo: f64, hi: f64, remote_only: bool| -> u64 {
        rows.iter()
            .filter(|r| (r.t as f64) >= lo * duration && (r.t as f64) < hi * duration)
            .filter(|r| !remote_only || r.site != "local")
            .map(|r| r.running)
            .sum()
    };
    let (q1, q4) = (quarter(0.0, 0.25, false), quarter(0.75, 1.0, false));
    let (r1, r4) = (quarter(0.0, 0.25, true), quarter(0.75, 1.0, true));
    checks.push((format!("(e) running-ticks q1 {q1} q4 {q4} (remote {r1} -> {r4})"), q4 > q1 && r4 > r1));

    let ok = checks.iter().all(|(_, ok)| *ok);
    let detail = checks
        .iter()
        .map(|(d, ok)| if *ok { d.clone() } else { format!("{d} [FAILED]") })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::check(ok, detail)
}

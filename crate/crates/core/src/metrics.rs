//! Metric exposition and windowed accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LOCAL_SITE;
use crate::queue::QueueSnapshot;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("invalid metric name {0:?}")]
    BadName(String),
    #[error("invalid label name {0:?}")]
    BadLabel(String),
}

fn valid_name(name: &str, colon: bool) -> bool {
    let mut chars = name.chars();
    let head_ok = |c: char| c.is_ascii_alphabetic() || c == '_' || (colon && c == ':');
    match chars.next() {
        Some(c) if head_ok(c) => chars.all(|c| head_ok(c) || c.is_ascii_digit()),
        _ => false,
    }
}

/// `[a-zA-Z_:][a-zA-Z0-9_:]*`
pub fn valid_metric_name(name: &str) -> bool {
    valid_name(name, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub value: f64,
    pub timestamp: Timestamp,
}

impl MetricSample {
    pub fn new(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = (String, String)>,
        value: f64,
        timestamp: Timestamp,
    ) -> Result<Self, MetricError> {
        let name = name.into();
        if !valid_metric_name(&name) {
            return Err(MetricError::BadName(name));
        }
        let labels: BTreeMap<String, String> = labels.into_iter().collect();
        if let Some(bad) = labels.keys().find(|k| !valid_name(k, false) || k.starts_with("__")) {
            return Err(MetricError::BadLabel(bad.clone()));
        }
        Ok(MetricSample {
            name,
            labels,
            value,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Counter,
    Gauge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricFamily {
    pub name: String,
    pub kind: MetricKind,
    pub help: String,
    pub samples: Vec<MetricSample>,
}

fn escape_label(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "+Inf" } else { "-Inf" }.into()
    } else {
        format!("{v}")
    }
}

/// Text exposition format, one `# HELP` and `# TYPE` per family.
pub fn render(families: &[MetricFamily]) -> String {
    let mut out = String::new();
    for f in families {
        let kind = match f.kind {
            MetricKind::Counter => "counter",
            MetricKind::Gauge => "gauge",
        };
        let _ = writeln!(out, "# HELP {} {}", f.name, f.help);
        let _ = writeln!(out, "# TYPE {} {}", f.name, kind);
        for s in &f.samples {
            out.push_str(&s.name);
            if !s.labels.is_empty() {
                let labels: Vec<String> = s
                    .labels
                    .iter()
                    .map(|(k, v)| format!("{k}=\"{}\"", escape_label(v)))
                    .collect();
                let _ = write!(out, "{{{}}}", labels.join(","));
            }
            let _ = writeln!(out, " {}", format_value(s.value));
        }
    }
    out
}

fn family(
    name: &str,
    kind: MetricKind,
    help: &str,
    label: Option<&str>,
    values: impl IntoIterator<Item = (String, f64)>,
    now: Timestamp,
) -> MetricFamily {
    let samples = values
        .into_iter()
        .map(|(lv, v)| {
            let labels = label.map(|l| (l.to_string(), lv));
            MetricSample::new(name, labels, v, now).expect("fixed names are valid")
        })
        .collect();
    MetricFamily {
        name: name.into(),
        kind,
        help: help.into(),
        samples,
    }
}

/// The gateway's metric families, built from a queue snapshot.
pub fn gateway_families(snap: &QueueSnapshot, now: Timestamp) -> Vec<MetricFamily> {
    let mut running: BTreeMap<String, f64> = BTreeMap::new();
    running.insert(LOCAL_SITE.into(), 0.0);
    for site in snap.nodes.keys() {
        running.insert(site.clone(), 0.0);
    }
    for (site, n) in &snap.running_by_site {
        running.insert(site.clone(), *n as f64);
    }

    let mut gpus: BTreeMap<String, f64> = snap.local_capacity.gpus.keys().map(|m| (m.clone(), 0.0)).collect();
    let allocations = std::iter::once(&snap.local_allocated).chain(snap.nodes.values().map(|n| &n.allocated));
    for alloc in allocations {
        for (model, n) in &alloc.gpus {
            *gpus.entry(model.clone()).or_insert(0.0) += *n as f64;
        }
    }

    vec![
        family(
            "jobs_running",
            MetricKind::Gauge,
            "Jobs in Running state per site.",
            Some("site"),
            running,
            now,
        ),
        family(
            "jobs_queued",
            MetricKind::Gauge,
            "Jobs waiting in the cluster queue.",
            None,
            [(String::new(), snap.counts.queued as f64)],
            now,
        ),
        family(
            "jobs_evicted_total",
            MetricKind::Counter,
            "Batch jobs evicted from the local pool.",
            None,
            [(String::new(), snap.evicted_total as f64)],
            now,
        ),
        family(
            "gpus_allocated",
            MetricKind::Gauge,
            "GPUs held by admitted jobs, per model.",
            Some("model"),
            gpus,
            now,
        ),
        family(
            "virtual_node_ready",
            MetricKind::Gauge,
            "1 if the virtual node lease is valid.",
            Some("site"),
            snap.nodes.iter().map(|(n, s)| (n.clone(), if s.ready { 1.0 } else { 0.0 })),
            now,
        ),
    ]
}

pub fn expose_metrics(snap: &QueueSnapshot, now: Timestamp) -> String {
    render(&gateway_families(snap, now))
}

/// One observation of usage for a (group, site) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub t: Timestamp,
    pub group: String,
    pub site: String,
    pub running: f64,
    pub gpus: BTreeMap<String, f64>,
    /// Cumulative evictions attributed to this pair.
    pub evicted_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub group: String,
    pub site: String,
    pub mean_running_jobs: f64,
    pub mean_gpus_allocated: BTreeMap<String, f64>,
    pub evictions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccountingError {
    #[error("window must be positive")]
    ZeroWindow,
    #[error("samples are not time-ordered at index {0}")]
    Unordered(usize),
}

/// Time-weighted means per (group, site, window).
///
/// Windows are aligned to multiples of `window_s`. Each sample's value holds
/// until the next sample of the same pair; the last one holds to the end of
/// its window. Means divide by the covered part of the window, which is the
/// whole window except before a pair's first sample. Windows without samples
/// produce no record.
pub fn aggregate_accounting(samples: &[UsageSample], window_s: u64) -> Result<Vec<AccountingRecord>, AccountingError> {
    if window_s == 0 {
        return Err(AccountingError::ZeroWindow);
    }
    if let Some(i) = samples.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(AccountingError::Unordered(i + 1));
    }
    let w = window_s as i64 * 1000;
    let mut by_key: BTreeMap<(&str, &str), Vec<&UsageSample>> = BTreeMap::new();
    for s in samples {
        by_key.entry((&s.group, &s.site)).or_default().push(s);
    }

    let mut out = Vec::new();
    for ((group, site), series) in by_key {
        let mut prev_counter = 0u64;
        let mut i = 0;
        while i < series.len() {
            let ws = series[i].t.as_millis().div_euclid(w) * w;
            let we = ws + w;
            let mut j = i;
            while j < series.len() && series[j].t.as_millis() < we {
                j += 1;
            }
            // carried value from the previous window covers [ws, first sample)
            let carried = if i > 0 { Some(series[i - 1]) } else { None };
            let covered_from = if carried.is_some() { ws } else { series[i].t.as_millis() };
            let covered = (we - covered_from) as f64;

            let mut run_area = 0.0;
            let mut gpu_area: BTreeMap<String, f64> = BTreeMap::new();
            let mut add = |s: &UsageSample, from: i64, to: i64| {
                let dt = (to - from) as f64;
                run_area += s.running * dt;
                for (m, v) in &s.gpus {
                    *gpu_area.entry(m.clone()).or_insert(0.0) += v * dt;
                }
            };
            if let Some(c) = carried {
                add(c, ws, series[i].t.as_millis());
            }
            for k in i..j {
                let end = if k + 1 < j { series[k + 1].t.as_millis() } else { we };
                add(series[k], series[k].t.as_millis(), end);
            }

            let last = series[j - 1].evicted_total;
            let evictions = last.saturating_sub(prev_counter);
            prev_counter = last;

            let (mean_running_jobs, mean_gpus_allocated) = if covered > 0.0 {
                (
                    run_area / covered,
                    gpu_area.into_iter().map(|(m, a)| (m, a / covered)).collect(),
                )
            } else {
                (0.0, BTreeMap::new())
            };
            out.push(AccountingRecord {
                window_start: Timestamp::from_millis(ws),
                window_end: Timestamp::from_millis(we),
                group: group.to_string(),
                site: site.to_string(),
                mean_running_jobs,
                mean_gpus_allocated,
                evictions,
            });
            i = j;
        }
    }
    out.sort_by(|a, b| {
        (a.window_start, &a.group, &a.site).cmp(&(b.window_start, &b.group, &b.site))
    });
    Ok(out)
}

#[derive(Serialize)]
struct AccountingRow<'a> {
    window_start: String,
    window_end: String,
    group: &'a str,
    site: &'a str,
    mean_running_jobs: f64,
    mean_gpus_allocated: String,
    evictions: u64,
}

/// CSV with one row per record; GPU means as `model=value` joined by `;`.
pub fn accounting_csv(records: &[AccountingRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        let gpus: Vec<String> = r.mean_gpus_allocated.iter().map(|(m, v)| format!("{m}={v}")).collect();
        w.serialize(AccountingRow {
            window_start: r.window_start.to_rfc3339(),
            window_end: r.window_end.to_rfc3339(),
            group: &r.group,
            site: &r.site,
            mean_running_jobs: r.mean_running_jobs,
            mean_gpus_allocated: gpus.join(";"),
            evictions: r.evictions,
        })
        .expect("in-memory csv write");
    }
    if records.is_empty() {
        w.write_record([
            "window_start",
            "window_end",
            "group",
            "site",
            "mean_running_jobs",
            "mean_gpus_allocated",
            "evictions",
        ])
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}

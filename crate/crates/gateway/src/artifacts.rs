//! Files written by `gateway simulate` and `gateway account`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use offload_core::metrics::{accounting_csv, aggregate_accounting};
use offload_core::scenario::{emit_plot_data, usage_from_csv, ScenarioRun};

pub const TIMESERIES: &str = "timeseries.csv";
pub const SUMMARY: &str = "summary.json";
pub const DECISIONS: &str = "decisions.jsonl";
pub const ACCOUNTING: &str = "accounting.csv";
pub const PLOT: &str = "plot.json";

/// Writes every artifact of `run` into `dir`, creating it if needed.
pub fn write_run(run: &ScenarioRun, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> anyhow::Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(TIMESERIES, run.csv.as_bytes())?;
    put(SUMMARY, &serde_json::to_vec_pretty(&run.summary)?)?;
    let mut jsonl = Vec::new();
    for d in &run.decisions {
        serde_json::to_writer(&mut jsonl, d)?;
        jsonl.write_all(b"\n")?;
    }
    put(DECISIONS, &jsonl)?;
    put(ACCOUNTING, accounting_csv(&run.accounting).as_bytes())?;
    put(PLOT, &serde_json::to_vec(&emit_plot_data(&run.csv)?)?)?;
    Ok(written)
}

/// Time-series CSV in, accounting CSV out.
pub fn account(input: &Path, output: &Path, window_s: u64) -> anyhow::Result<usize> {
    let text = fs::read_to_string(input)?;
    let samples = usage_from_csv(&text)?;
    let records = aggregate_accounting(&samples, window_s)?;
    fs::write(output, accounting_csv(&records))?;
    Ok(records.len())
}

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use offload_core::plugin::sim::SiteModel;
use offload_core::scenario::ScenarioConfig;
use offload_gateway::artifacts;
use offload_gateway::config::ServeConfig;
use offload_gateway::live::{build_platform, build_plugin, PluginBackend};
use offload_gateway::server::{gateway_router, plugin_router, serve, Controller};
use tracing_subscriber::EnvFilter;

/// Opportunistic batch gateway with virtual-node offloading.
#[derive(Parser)]
#[command(name = "gateway", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway API and controller against real plugin servers.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a scenario in simulated time and write its artifacts.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate a time-series CSV into per-window accounting records.
    Account {
        #[arg(long, default_value_t = 300)]
        window: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the plugin protocol for one site.
    Plugin(PluginArgs),
}

#[derive(Args)]
struct PluginArgs {
    #[arg(long)]
    site: String,
    #[arg(long, default_value = "127.0.0.1:9101")]
    listen: String,
    /// Run jobs as host processes.
    #[arg(long, conflicts_with = "sim", required_unless_present = "sim")]
    local: bool,
    /// Simulate a site from a TOML site model.
    #[arg(long, value_name = "MODEL")]
    sim: Option<PathBuf>,
    /// Concurrent processes for --local.
    #[arg(long, default_value_t = 4)]
    slots: usize,
    #[arg(long)]
    scratch: Option<PathBuf>,
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("GATEWAY_LOG_LEVEL").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> anyhow::Result<()> {
    init_logging();
    match Cli::parse().command {
        Command::Serve { config } => {
            let cfg = ServeConfig::load(&config)?;
            let (platform, clock) = build_platform(&cfg)?;
            let (ctl, _thread) = Controller::spawn(platform, clock, Duration::from_millis(cfg.tick_ms));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&cfg.listen, gateway_router(ctl)))?;
        }
        Command::Simulate { scenario, out, seed } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let started = std::time::Instant::now();
            let run = offload_core::scenario::run_scenario(&cfg)?;
            let written = artifacts::write_run(&run, &out)?;
            tracing::info!(elapsed_ms = started.elapsed().as_millis() as u64, "scenario finished");
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
            for p in written {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Account { window, input, out } => {
            let n = artifacts::account(&input, &out, window)?;
            eprintln!("wrote {n} accounting records to {}", out.display());
        }
        Command::Plugin(args) => {
            let backend = match args.sim {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let model: SiteModel = toml::from_str(&text)?;
                    model.validate()?;
                    PluginBackend::Sim(model)
                }
                None => PluginBackend::Local {
                    slots: args.slots,
                    scratch: args.scratch,
                },
            };
            let plugin = build_plugin(&args.site, backend)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&args.listen, plugin_router(Arc::new(Mutex::new(plugin)))))?;
        }
    }
    Ok(())
}

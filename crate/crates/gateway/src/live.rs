//! Wiring for `gateway serve` and `gateway plugin`.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use offload_core::gatekeeper::Gatekeeper;
use offload_core::platform::Platform;
use offload_core::plugin::client::{Loopback, PluginClient, ProtocolClient};
use offload_core::plugin::local::LocalExecutor;
use offload_core::plugin::sim::{SimulatedSite, SiteModel};
use offload_core::plugin::Plugin;
use offload_core::time::SharedClock;
use offload_core::SystemClock;

use crate::config::ServeConfig;
use crate::transport::HttpTransport;

pub const PLUGIN_TIMEOUT: Duration = Duration::from_secs(5);

fn scratch_root(configured: Option<PathBuf>, tag: &str) -> std::io::Result<PathBuf> {
    match configured {
        Some(p) => Ok(p),
        None => {
            let p = std::env::temp_dir().join(format!("offload-{tag}-{}", std::process::id()));
            std::fs::create_dir_all(&p)?;
            Ok(p)
        }
    }
}

/// Platform for live mode: local jobs run as host processes, virtual nodes
/// talk HTTP to their plugin servers.
pub fn build_platform(cfg: &ServeConfig) -> anyhow::Result<(Platform, SharedClock)> {
    let clock: SharedClock = Arc::new(SystemClock);
    let gatekeeper = Gatekeeper::new(cfg.policy_set()?, cfg.secret_store()?, cfg.gatekeeper.clone());
    let scratch = scratch_root(cfg.local.scratch.clone(), "local")?;
    let executor = LocalExecutor::new("local", cfg.local.slots, scratch, clock.clone())?;
    let local: Box<dyn PluginClient> = Box::new(ProtocolClient::new(Loopback::new(Arc::new(Mutex::new(executor)))));
    let mut platform = Platform::new(gatekeeper, cfg.queue.clone(), local);
    let now = clock.now();
    for node in &cfg.nodes {
        let client = Box::new(ProtocolClient::new(HttpTransport::new(&node.plugin_endpoint, PLUGIN_TIMEOUT)));
        platform.register_node(node.clone(), client, now)?;
        tracing::info!(node = %node.node_id, endpoint = %node.plugin_endpoint, "virtual node registered");
    }
    Ok((platform, clock))
}

pub enum PluginBackend {
    Local { slots: usize, scratch: Option<PathBuf> },
    Sim(SiteModel),
}

pub fn build_plugin(site: &str, backend: PluginBackend) -> anyhow::Result<Box<dyn Plugin>> {
    let clock: SharedClock = Arc::new(SystemClock);
    Ok(match backend {
        PluginBackend::Local { slots, scratch } => {
            let scratch = scratch_root(scratch, site)?;
            Box::new(LocalExecutor::new(site, slots, scratch, clock)?)
        }
        PluginBackend::Sim(mut model) => {
            model.site = site.to_string();
            Box::new(SimulatedSite::new(model, clock)?)
        }
    })
}

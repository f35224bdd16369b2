//! Live-mode configuration files.

use std::path::{Path, PathBuf};

use offload_core::gatekeeper::{ConfigError, GatekeeperConfig, PolicySet, SecretStore};
use offload_core::queue::QueueConfig;
use offload_core::vnode::NodeConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Policy(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_tick_ms() -> u64 {
    1000
}
fn default_slots() -> usize {
    4
}

/// How locally admitted jobs are executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalRuntimeConfig {
    /// Processes run concurrently by the local executor.
    #[serde(default = "default_slots")]
    pub slots: usize,
    /// Scratch root for job directories. Defaults to a fresh temp directory.
    #[serde(default)]
    pub scratch: Option<PathBuf>,
}

impl Default for LocalRuntimeConfig {
    fn default() -> Self {
        LocalRuntimeConfig {
            slots: default_slots(),
            scratch: None,
        }
    }
}

/// `gateway serve --config FILE`. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Controller step period.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Group roster, a TOML file with `[[groups]]` tables.
    pub policies: PathBuf,
    /// One file per secret; `NAME.shareable` containing `true` marks it shareable.
    #[serde(default)]
    pub secrets_dir: Option<PathBuf>,
    #[serde(default)]
    pub gatekeeper: GatekeeperConfig,
    #[serde(default)]
    pub queue: QueueConfig,
    #[serde(default)]
    pub local: LocalRuntimeConfig,
    /// Virtual nodes; `plugin_endpoint` is the base URL of a plugin server.
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
}

fn read(path: &Path) -> Result<String, ServeConfigError> {
    std::fs::read_to_string(path).map_err(|source| ServeConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self, ServeConfigError> {
        let text = read(path)?;
        let mut cfg: ServeConfig = toml::from_str(&text).map_err(|source| ServeConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.policies = base.join(&cfg.policies);
        cfg.secrets_dir = cfg.secrets_dir.map(|d| base.join(d));
        cfg.local.scratch = cfg.local.scratch.map(|d| base.join(d));
        if cfg.tick_ms == 0 {
            return Err(ServeConfigError::Invalid("tick_ms must be positive".into()));
        }
        for n in &cfg.nodes {
            if !n.plugin_endpoint.starts_with("http://") {
                return Err(ServeConfigError::Invalid(format!(
                    "node {}: plugin_endpoint must be an http:// URL",
                    n.node_id
                )));
            }
        }
        Ok(cfg)
    }

    pub fn policy_set(&self) -> Result<PolicySet, ServeConfigError> {
        Ok(PolicySet::load(&self.policies)?)
    }

    pub fn secret_store(&self) -> Result<SecretStore, ServeConfigError> {
        match &self.secrets_dir {
            Some(dir) => Ok(SecretStore::load_dir(dir)?),
            None => Ok(SecretStore::new()),
        }
    }
}

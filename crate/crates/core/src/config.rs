//! TOML configuration shared by the monitor, the service and the CLI.
//!
//! ```toml
//! [storage]
//! root = "/var/lib/rollguard"
//!
//! [monitor]
//! head_tracking = "pointer_leaves"
//! retention_snapshots = 10
//!
//! [policy]
//! rollback = ["release-manager"]
//!
//! [service]
//! listen = "127.0.0.1:7380"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::AllowList;
use crate::state::HeadTracking;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7380";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub storage: StorageConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub policy: AllowList,
    #[serde(default)]
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    /// Base directory; `trusted/` and `untrusted/` live below it unless
    /// overridden.
    pub root: Option<PathBuf>,
    pub trusted_dir: Option<PathBuf>,
    pub untrusted_dir: Option<PathBuf>,
}

/// What recovery does with an ambiguous or interrupted store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPolicy {
    /// Newest authentic checkpoint within two counter steps of the hardware
    /// counter whose log ends in a completion record.
    #[default]
    LatestFullyPaired,
    /// Refuse to start; an operator decides.
    Halt,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub head_tracking: HeadTracking,
    pub recovery_policy: RecoveryPolicy,
    /// Number of most recent snapshots whose members retention keeps. When
    /// set, every commit that creates a snapshot is followed by a prune of
    /// expired members, made as the `retention` actor.
    pub retention_snapshots: Option<usize>,
    /// Derive transaction ids and timestamps from the counter instead of
    /// randomness and the clock, so runs are reproducible.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.to_owned(),
        }
    }
}

impl Config {
    /// Configuration rooted at `root` with every other setting defaulted.
    pub fn for_root(root: impl Into<PathBuf>) -> Self {
        Self {
            storage: StorageConfig {
                root: Some(root.into()),
                ..StorageConfig::default()
            },
            monitor: MonitorConfig::default(),
            policy: AllowList::default(),
            service: ServiceConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.trusted_dir()?;
        cfg.untrusted_dir()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve(&self, explicit: &Option<PathBuf>, sub: &str) -> Result<PathBuf> {
        match (explicit, &self.storage.root) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(root)) => Ok(root.join(sub)),
            (None, None) => Err(Error::Config(format!(
                "storage.root or storage.{sub}_dir must be set"
            ))),
        }
    }

    pub fn trusted_dir(&self) -> Result<PathBuf> {
        self.resolve(&self.storage.trusted_dir, "trusted")
    }

    pub fn untrusted_dir(&self) -> Result<PathBuf> {
        self.resolve(&self.storage.untrusted_dir, "untrusted")
    }

    pub fn with_head_tracking(mut self, mode: HeadTracking) -> Self {
        self.monitor.head_tracking = mode;
        self
    }

    pub fn deterministic(mut self) -> Self {
        self.monitor.deterministic = true;
        self
    }
}

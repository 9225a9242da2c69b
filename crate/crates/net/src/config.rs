//! Station configuration file (TOML).
//!
//! ```toml
//! service_id = "st-cern"
//! groups = ["cms"]
//! registries = ["10.0.0.5:7400"]
//! listen = "0.0.0.0:7500"
//! store_path = "/var/lib/vigil/st-cern"
//! trust_key = "shared-secret"
//!
//! [[tasks]]
//! module = "exec"
//! targets = ["/usr/local/bin/node-metrics n01"]
//! period_ms = 60000
//! deadline_ms = 10000
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vigil_core::collector::EngineConfig;
use vigil_core::probe::ProbeConfig;
use vigil_core::store::{RetentionPolicy, Tier};
use vigil_core::supervisor::SignedWatch;

use crate::error::{NetError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    pub service_id: String,
    pub groups: Vec<String>,
    pub registries: Vec<String>,
    pub registry_token: Option<String>,
    /// Control-protocol listen address.
    pub listen: String,
    /// Endpoint announced in the registry; the bound address when absent.
    pub advertise: Option<String>,
    pub lease_ms: u64,
    /// Farm name stamped on synthetic values; the service id when empty.
    pub farm: String,
    pub role: String,
    pub attributes: BTreeMap<String, String>,
    /// Directory of the persistent store; in memory when absent.
    pub store_path: Option<PathBuf>,
    pub retention: Vec<Tier>,
    pub compact_every_ms: u64,
    /// Secret that signs filter specs and action agents.
    pub trust_key: String,
    /// Values a subscriber lane may queue before it is disconnected.
    pub queue_hwm: usize,
    pub engine: EngineConfig,
    pub tasks: Vec<TaskEntry>,
    pub probe: Option<ProbeSection>,
    pub supervisor: Option<SupervisorSection>,
}

impl Default for StationConfig {
    fn default() -> Self {
        Self {
            service_id: String::new(),
            groups: Vec::new(),
            registries: Vec::new(),
            registry_token: None,
            listen: "127.0.0.1:0".into(),
            advertise: None,
            lease_ms: 30_000,
            farm: String::new(),
            role: "station".into(),
            attributes: BTreeMap::new(),
            store_path: None,
            retention: RetentionPolicy::default().tiers().to_vec(),
            compact_every_ms: 60_000,
            trust_key: String::new(),
            queue_hwm: 10_000,
            engine: EngineConfig::default(),
            tasks: Vec::new(),
            probe: None,
            supervisor: None,
        }
    }
}

/// One schedule line: `module` runs against each target every `period_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub module: String,
    pub targets: Vec<String>,
    pub period_ms: u64,
    #[serde(default)]
    pub deadline_ms: Option<u64>,
    /// Spreads first runs of the targets evenly over one period.
    #[serde(default)]
    pub stagger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    /// UDP address of the probe agent; without it the prober is driven
    /// externally (simulated links).
    pub listen: Option<String>,
    /// Peer id to UDP address.
    pub peers: BTreeMap<String, String>,
    #[serde(flatten)]
    pub config: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            listen: None,
            peers: BTreeMap::new(),
            config: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorSection {
    pub watches: Vec<SignedWatch>,
    /// JSON-lines alert log; alerts are kept in memory when absent.
    pub alert_log: Option<PathBuf>,
    pub webhook: Option<String>,
    /// Shell command run as `<command> <target>` by the exec actuator.
    pub restart_command: Option<String>,
}

impl StationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn farm_name(&self) -> &str {
        if self.farm.is_empty() {
            &self.service_id
        } else {
            &self.farm
        }
    }

    pub fn retention_policy(&self) -> Result<RetentionPolicy> {
        Ok(RetentionPolicy::new(self.retention.clone())?)
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.service_id.is_empty() {
            out.push("service_id is required".to_string());
        }
        if self.groups.is_empty() {
            out.push("at least one group is required".to_string());
        }
        if self.lease_ms == 0 {
            out.push("lease_ms must be positive".to_string());
        }
        if self.compact_every_ms == 0 {
            out.push("compact_every_ms must be positive".to_string());
        }
        if self.queue_hwm == 0 {
            out.push("queue_hwm must be positive".to_string());
        }
        if self.engine.max_workers == 0 {
            out.push("engine.max_workers must be positive".to_string());
        }
        if let Err(e) = RetentionPolicy::new(self.retention.clone()) {
            out.push(e.to_string());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.period_ms == 0 {
                out.push(format!("tasks[{i}]: period_ms must be positive"));
            }
            if t.targets.is_empty() {
                out.push(format!("tasks[{i}]: no targets"));
            }
        }
        if let Some(p) = &self.probe {
            if let Err(e) = p.config.validate() {
                out.push(format!("probe: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NetError::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = StationConfig::from_toml(
            r#"
            service_id = "st-1"
            groups = ["cms"]
            [[tasks]]
            module = "exec"
            targets = ["echo"]
            period_ms = 60000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.lease_ms, 30_000);
        assert_eq!(cfg.engine.max_workers, 64);
        assert_eq!(cfg.engine.default_deadline_ms, 10_000);
        assert_eq!(cfg.farm_name(), "st-1");
        assert_eq!(cfg.tasks[0].deadline_ms, None);
        assert!(cfg.retention_policy().is_ok());
    }

    #[test]
    fn probe_section_flattens_estimator_settings() {
        let cfg = StationConfig::from_toml(
            r#"
            service_id = "r1"
            groups = ["vrvs"]
            [probe]
            listen = "127.0.0.1:0"
            period_ms = 500
            window = 20
            [probe.peers]
            r2 = "127.0.0.1:9000"
            "#,
        )
        .unwrap();
        let p = cfg.probe.unwrap();
        assert_eq!(p.config.period_ms, 500);
        assert_eq!(p.config.window, 20);
        assert_eq!(p.config.alpha, ProbeConfig::default().alpha);
        assert_eq!(p.peers["r2"], "127.0.0.1:9000");
    }

    #[test]
    fn all_problems_listed() {
        let err = StationConfig::from_toml("lease_ms = 0\n[[tasks]]\nmodule='x'\ntargets=[]\nperiod_ms=0\n").unwrap_err();
        let msg = err.to_string();
        for needle in ["service_id", "group", "lease_ms", "period_ms", "no targets"] {
            assert!(msg.contains(needle), "{msg}");
        }
        assert!(StationConfig::from_toml("bogus = 1").is_err());
    }
}

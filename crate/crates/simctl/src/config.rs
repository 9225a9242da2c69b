//! Scenario file (TOML). [`REFERENCE_CONFIG`] lists every key with its
//! default value.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vigil_core::collector::EngineConfig;
use vigil_core::overlay::MstConfig;
use vigil_core::probe::ProbeConfig;
use vigil_core::registry::RegistryConfig;
use vigil_core::store::{RetentionPolicy, Tier};
use vigil_net::RegistryServerConfig;

use crate::error::{Result, SimError};

/// The documented reference scenario; parses to [`ScenarioConfig::default`].
pub const REFERENCE_CONFIG: &str = include_str!("../reference.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Fixes every random draw: node walks, response times, link samples.
    pub seed: u64,
    pub duration_ms: u64,
    /// Simulated milliseconds per real millisecond; all periods, deadlines
    /// and windows are in simulated time so their ratios are preserved.
    pub time_factor: f64,
    pub groups: Vec<String>,
    pub trust_key: String,
    pub farms: Vec<FarmSpec>,
    pub reflectors: Vec<String>,
    /// Unordered pairs; a pair not listed has no link (every probe lost).
    pub links: Vec<LinkSpec>,
    pub faults: Vec<FaultEvent>,
    pub registry: RegistrySim,
    pub station: StationSim,
    pub probe: ProbeConfig,
    pub mst: MstConfig,
    pub supervisor: SupervisorSim,
    pub repository: RepositorySim,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_ms: 180_000,
            time_factor: 1.0,
            groups: vec!["sim".into()],
            trust_key: "sim-trust".into(),
            farms: vec![FarmSpec::default()],
            reflectors: Vec::new(),
            links: Vec::new(),
            faults: Vec::new(),
            registry: RegistrySim::default(),
            station: StationSim::default(),
            probe: ProbeConfig::default(),
            mst: MstConfig::default(),
            supervisor: SupervisorSim::default(),
            repository: RepositorySim::default(),
        }
    }
}

/// A farm served by one station: `nodes` targets, each answering with
/// `params` values every `period_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarmSpec {
    pub name: String,
    pub nodes: usize,
    pub params: usize,
    pub period_ms: u64,
    pub deadline_ms: u64,
    /// Simulated response time of a node, uniform in `[min, max]`.
    pub response_min_ms: u64,
    pub response_max_ms: u64,
    /// Also schedule the `sim_net` traffic module on every node.
    pub traffic: bool,
}

impl Default for FarmSpec {
    fn default() -> Self {
        Self {
            name: "farm-a".into(),
            nodes: 500,
            params: 200,
            period_ms: 60_000,
            deadline_ms: 5_000,
            response_min_ms: 1_000,
            response_max_ms: 3_000,
            traffic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub rtt_ms: f64,
    /// Samples are `rtt_ms + jitter_ms * u`, `u` uniform in `[-1, 1]`.
    #[serde(default)]
    pub jitter_ms: f64,
    /// Independent drop probability of each probe round trip.
    #[serde(default)]
    pub loss: f64,
}

/// Unknown keys are rejected by the action, which sees every key but `at_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    /// Simulated milliseconds after scenario start.
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultAction {
    /// The node stops answering; its collects hang until their deadline.
    KillNode { farm: String, node: String },
    RestoreNode { farm: String, node: String },
    /// The reflector process dies; its links drop every probe.
    KillReflector { id: String },
    RestoreReflector { id: String },
    /// Overrides the given properties of one link.
    SetLink {
        a: String,
        b: String,
        #[serde(default)]
        rtt_ms: Option<f64>,
        #[serde(default)]
        jitter_ms: Option<f64>,
        #[serde(default)]
        loss: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrySim {
    pub lease_ms: u64,
    pub min_lease_ms: u64,
    pub max_lease_ms: u64,
    pub sweep_ms: u64,
}

impl Default for RegistrySim {
    fn default() -> Self {
        Self {
            lease_ms: 30_000,
            min_lease_ms: 5_000,
            max_lease_ms: 300_000,
            sweep_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationSim {
    pub queue_hwm: usize,
    pub compact_every_ms: u64,
    pub retention: Vec<Tier>,
    pub engine: EngineConfig,
}

impl Default for StationSim {
    fn default() -> Self {
        Self {
            queue_hwm: 10_000,
            compact_every_ms: 60_000,
            retention: RetentionPolicy::default().tiers().to_vec(),
            engine: EngineConfig::default(),
        }
    }
}

/// A watch per reflector, restarted by the simulated actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorSim {
    pub enabled: bool,
    pub period_ms: u64,
    pub check_deadline_ms: u64,
    pub restart_limit: u32,
    /// When false every restart attempt fails (escalation path).
    pub restart_works: bool,
}

impl Default for SupervisorSim {
    fn default() -> Self {
        Self {
            enabled: true,
            period_ms: 2_000,
            check_deadline_ms: 1_000,
            restart_limit: 2,
            restart_works: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepositorySim {
    pub enabled: bool,
    pub listen: String,
    pub admin_token: String,
}

impl Default for RepositorySim {
    fn default() -> Self {
        Self {
            enabled: true,
            listen: "127.0.0.1:0".into(),
            admin_token: "sim-admin".into(),
        }
    }
}

/// File form of a standalone registry server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryFile {
    pub listen: String,
    pub peer_id: Option<String>,
    /// Endpoints of peer registries for anti-entropy sync.
    pub peers: Vec<String>,
    /// Groups served; empty serves every group.
    pub groups: Vec<String>,
    pub sync_ms: u64,
    pub token: Option<String>,
    pub min_lease_ms: u64,
    pub max_lease_ms: u64,
    pub sweep_ms: u64,
    pub event_queue: usize,
}

impl Default for RegistryFile {
    fn default() -> Self {
        let registry = RegistryConfig::default();
        Self {
            listen: "127.0.0.1:7400".into(),
            peer_id: None,
            peers: Vec::new(),
            groups: Vec::new(),
            sync_ms: 5_000,
            token: None,
            min_lease_ms: registry.min_lease_ms,
            max_lease_ms: registry.max_lease_ms,
            sweep_ms: registry.sweep_ms,
            event_queue: registry.event_queue,
        }
    }
}

impl RegistryFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn server_config(&self) -> RegistryServerConfig {
        RegistryServerConfig {
            listen: self.listen.clone(),
            peer_id: self.peer_id.clone(),
            peers: self.peers.clone(),
            registry: RegistryConfig {
                min_lease_ms: self.min_lease_ms,
                max_lease_ms: self.max_lease_ms,
                sweep_ms: self.sweep_ms,
                groups: self.groups.iter().cloned().collect(),
                event_queue: self.event_queue,
            },
            sync_ms: self.sync_ms,
            token: self.token.clone(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn farm(&self, name: &str) -> Option<&FarmSpec> {
        self.farms.iter().find(|f| f.name == name)
    }

    pub fn link(&self, a: &str, b: &str) -> Option<&LinkSpec> {
        self.links.iter().find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.duration_ms == 0 {
            out.push("duration_ms must be positive".to_string());
        }
        if !(self.time_factor > 0.0 && self.time_factor.is_finite()) {
            out.push("time_factor must be positive".to_string());
        }
        if self.groups.is_empty() {
            out.push("at least one group is required".to_string());
        }
        if self.farms.is_empty() && self.reflectors.is_empty() {
            out.push("nothing to simulate: no farms and no reflectors".to_string());
        }
        let mut names = BTreeSet::new();
        for f in &self.farms {
            let at = format!("farm `{}`", f.name);
            if f.name.is_empty() {
                out.push("farm names must be non-empty".to_string());
            }
            if !names.insert(f.name.as_str()) {
                out.push(format!("{at} is listed twice"));
            }
            if f.nodes == 0 || f.params == 0 {
                out.push(format!("{at}: nodes and params must be positive"));
            }
            if f.params > crate::world::MAX_PARAMS {
                out.push(format!("{at}: at most {} params", crate::world::MAX_PARAMS));
            }
            if f.period_ms == 0 || f.deadline_ms == 0 {
                out.push(format!("{at}: period_ms and deadline_ms must be positive"));
            }
            if f.response_min_ms > f.response_max_ms {
                out.push(format!("{at}: response_min_ms exceeds response_max_ms"));
            }
        }
        for r in &self.reflectors {
            if r.is_empty() {
                out.push("reflector ids must be non-empty".to_string());
            }
            if !names.insert(r.as_str()) {
                out.push(format!("reflector `{r}` clashes with another farm or reflector"));
            }
        }
        let reflectors: BTreeSet<&str> = self.reflectors.iter().map(String::as_str).collect();
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            let at = format!("link {}-{}", l.a, l.b);
            if l.a == l.b {
                out.push(format!("{at}: a link needs two distinct ends"));
            }
            if !reflectors.contains(l.a.as_str()) || !reflectors.contains(l.b.as_str()) {
                out.push(format!("{at}: both ends must be listed reflectors"));
            }
            let pair = if l.a <= l.b { (&l.a, &l.b) } else { (&l.b, &l.a) };
            if !pairs.insert(pair) {
                // one entry per unordered pair keeps base RTTs symmetric
                out.push(format!("{at}: pair listed twice"));
            }
            if !(l.rtt_ms > 0.0 && l.rtt_ms.is_finite()) {
                out.push(format!("{at}: rtt_ms must be positive"));
            }
            if !(l.jitter_ms >= 0.0 && l.jitter_ms.is_finite()) {
                out.push(format!("{at}: jitter_ms must be non-negative"));
            }
            if !(0.0..=1.0).contains(&l.loss) {
                out.push(format!("{at}: loss must be in [0, 1]"));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            if let FaultAction::SetLink { rtt_ms, jitter_ms, loss, .. } = &f.action {
                if rtt_ms.is_some_and(|r| !(r > 0.0)) || jitter_ms.is_some_and(|j| !(j >= 0.0)) {
                    out.push(format!("faults[{i}]: rtt_ms must be positive and jitter_ms non-negative"));
                }
                if loss.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                    out.push(format!("faults[{i}]: loss must be in [0, 1]"));
                }
            }
        }
        if self.registry.lease_ms == 0 || self.registry.sweep_ms == 0 {
            out.push("registry: lease_ms and sweep_ms must be positive".to_string());
        }
        if self.registry.min_lease_ms > self.registry.max_lease_ms {
            out.push("registry: min_lease_ms exceeds max_lease_ms".to_string());
        }
        if let Err(e) = RetentionPolicy::new(self.station.retention.clone()) {
            out.push(format!("station: {e}"));
        }
        if self.station.queue_hwm == 0 || self.station.compact_every_ms == 0 || self.station.engine.max_workers == 0 {
            out.push("station: queue_hwm, compact_every_ms and engine.max_workers must be positive".to_string());
        }
        if let Err(e) = self.probe.validate() {
            out.push(format!("probe: {e}"));
        }
        if let Err(e) = self.mst.validate() {
            out.push(format!("mst: {e}"));
        }
        let s = &self.supervisor;
        if s.enabled && (s.check_deadline_ms == 0 || s.period_ms <= s.check_deadline_ms || s.restart_limit == 0) {
            out.push("supervisor: needs 0 < check_deadline_ms < period_ms and restart_limit >= 1".to_string());
        }
        if self.repository.enabled && self.repository.admin_token.is_empty() {
            out.push("repository: admin_token must be non-empty".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Invalid(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_spells_out_the_defaults() {
        let parsed: ScenarioConfig = toml::from_str(REFERENCE_CONFIG).unwrap();
        assert_eq!(parsed, ScenarioConfig::default());
        assert!(parsed.validate().is_ok());
    }

    #[test]
    fn faults_and_links_parse() {
        let cfg = ScenarioConfig::from_toml(
            r#"
            farms = []
            reflectors = ["r1", "r2"]
            [[links]]
            a = "r1"
            b = "r2"
            rtt_ms = 40.0
            [[faults]]
            at_ms = 30000
            action = "kill_reflector"
            id = "r1"
            [[faults]]
            at_ms = 40000
            action = "set_link"
            a = "r2"
            b = "r1"
            loss = 0.6
            "#,
        )
        .unwrap();
        assert_eq!(cfg.faults[0].action, FaultAction::KillReflector { id: "r1".into() });
        assert_eq!(cfg.link("r2", "r1").unwrap().rtt_ms, 40.0);
        assert_eq!(cfg.links[0].loss, 0.0);
        let typo = "farms = []\nreflectors = [\"r1\"]\n[[faults]]\nat_ms = 1\naction = \"kill_reflector\"\nid = \"r1\"\nidd = 2\n";
        assert!(ScenarioConfig::from_toml(typo).is_err());
    }

    #[test]
    fn registry_file_maps_to_server_config() {
        let f = RegistryFile::from_toml("listen = \"0.0.0.0:9\"\ngroups = [\"a\"]\nmin_lease_ms = 10\ntoken = \"t\"\n").unwrap();
        let c = f.server_config();
        assert_eq!(c.listen, "0.0.0.0:9");
        assert_eq!(c.registry.min_lease_ms, 10);
        assert_eq!(c.registry.max_lease_ms, RegistryConfig::default().max_lease_ms);
        assert!(c.registry.groups.contains("a"));
        assert_eq!(c.token.as_deref(), Some("t"));
        assert!(RegistryFile::from_toml("lisen = 1").is_err());
    }

    #[test]
    fn every_problem_is_listed() {
        let cfg = ScenarioConfig {
            duration_ms: 0,
            reflectors: vec!["r1".into(), "r2".into()],
            links: vec![
                LinkSpec { a: "r1".into(), b: "r2".into(), rtt_ms: 10.0, jitter_ms: 0.0, loss: 0.0 },
                LinkSpec { a: "r2".into(), b: "r1".into(), rtt_ms: 12.0, jitter_ms: 0.0, loss: 1.5 },
                LinkSpec { a: "r1".into(), b: "zz".into(), rtt_ms: -1.0, jitter_ms: 0.0, loss: 0.0 },
            ],
            ..ScenarioConfig::default()
        };
        let text = cfg.validate().unwrap_err().to_string();
        for needle in ["duration_ms", "pair listed twice", "loss must be", "listed reflectors", "rtt_ms must be positive"] {
            assert!(text.contains(needle), "{needle}: {text}");
        }
    }
}

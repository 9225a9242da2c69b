//! Repository configuration file (TOML).
//!
//! ```toml
//! registries = ["10.0.0.5:7400"]
//! groups = ["cms"]
//! listen = "0.0.0.0:8080"
//! admin_tokens = ["operator-token"]
//!
//! [[predicates]]
//! param = "Load.*"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vigil_core::overlay::MstConfig;
use vigil_core::predicate::{Predicate, PredicateSpec};
use vigil_core::probe::CostParams;
use vigil_core::store::{RetentionPolicy, Tier};
use vigil_core::subscription::FilterSpec;

use crate::error::{RepoError, Result};

/// A filter agent deployed to every attached station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignedFilter {
    pub spec: FilterSpec,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepoConfig {
    /// Client name announced to stations; also the source of the
    /// repository's own series (tree metrics).
    pub repo_id: String,
    pub registries: Vec<String>,
    pub groups: Vec<String>,
    /// Subscriptions opened on every station.
    pub predicates: Vec<PredicateSpec>,
    pub filters: Vec<SignedFilter>,
    /// HTTP listen address.
    pub listen: String,
    pub admin_enabled: bool,
    pub admin_tokens: Vec<String>,
    /// Secret behind the filter-signing endpoint; signing is off when absent.
    pub trust_key: Option<String>,
    /// Directory holding one store per source; in memory when absent.
    pub store_path: Option<PathBuf>,
    pub retention: Vec<Tier>,
    pub compact_every_ms: u64,
    /// JSON-lines audit trail; kept in memory only when absent.
    pub audit_log: Option<PathBuf>,
    /// Services whose `role` attribute has this value are overlay vertices.
    pub reflector_role: String,
    pub mst: MstConfig,
    pub cost: CostParams,
    /// Events a live stream may queue before it is disconnected.
    pub stream_queue: usize,
    pub backoff_min_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for RepoConfig {
    fn default() -> Self {
        Self {
            repo_id: "repository".into(),
            registries: Vec::new(),
            groups: Vec::new(),
            predicates: vec![PredicateSpec::default()],
            filters: Vec::new(),
            listen: "127.0.0.1:8080".into(),
            admin_enabled: true,
            admin_tokens: Vec::new(),
            trust_key: None,
            store_path: None,
            retention: RetentionPolicy::default().tiers().to_vec(),
            compact_every_ms: 60_000,
            audit_log: None,
            reflector_role: "reflector".into(),
            mst: MstConfig::default(),
            cost: CostParams::default(),
            stream_queue: 1_024,
            backoff_min_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl RepoConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RepoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn retention_policy(&self) -> Result<RetentionPolicy> {
        Ok(RetentionPolicy::new(self.retention.clone())?)
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.repo_id.is_empty() {
            out.push("repo_id is required".to_string());
        }
        if self.registries.is_empty() {
            out.push("at least one registry endpoint is required".to_string());
        }
        if self.groups.is_empty() {
            out.push("at least one group is required".to_string());
        }
        if self.predicates.is_empty() {
            out.push("at least one subscription predicate is required".to_string());
        }
        for (i, p) in self.predicates.iter().enumerate() {
            if let Err(e) = Predicate::new(p.clone()) {
                out.push(format!("predicates[{i}]: {e}"));
            }
        }
        if self.admin_enabled && self.admin_tokens.is_empty() {
            out.push("admin endpoints are enabled but admin_tokens is empty".to_string());
        }
        if self.admin_tokens.iter().any(String::is_empty) {
            out.push("admin tokens must be non-empty".to_string());
        }
        if let Err(e) = RetentionPolicy::new(self.retention.clone()) {
            out.push(e.to_string());
        }
        if self.compact_every_ms == 0 {
            out.push("compact_every_ms must be positive".to_string());
        }
        if let Err(e) = self.mst.validate() {
            out.push(format!("mst: {e}"));
        }
        if !(self.cost.loss_cutoff > 0.0 && self.cost.loss_cutoff <= 1.0) {
            out.push("cost.loss_cutoff must be in (0, 1]".to_string());
        }
        if self.stream_queue == 0 {
            out.push("stream_queue must be positive".to_string());
        }
        if self.backoff_min_ms == 0 || self.backoff_max_ms < self.backoff_min_ms {
            out.push("backoff needs 0 < backoff_min_ms <= backoff_max_ms".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RepoError::Config(problems.join("; ")))
        }
    }

    pub fn compiled_predicates(&self) -> Result<Vec<Predicate>> {
        self.predicates
            .iter()
            .map(|p| Predicate::new(p.clone()).map_err(RepoError::from))
            .collect()
    }
}
